"""SGD training loop, configs, history and checkpoints for both models.

All randomness in a run comes from one ``numpy`` generator seeded from
``TrainConfig.seed`` and consumed in a fixed order: parameter init, then per
epoch the minibatch shuffle (if any) followed by gate noise for each step.
"""
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import dann as dann_mod
from . import lspin as lspin_mod
from . import ndcore as nd
from .datapipe import schema_hash
from .errors import ConfigError, DivergenceError, NonFiniteError

MODELS = ("dann", "lspin")
CHECKPOINT_FORMAT = "neurotype-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    model: str = "lspin"
    learning_rate: float = 0.0599
    epochs: int = 1000
    batch_size: int = None  # None = full batch
    seed: int = 0
    validation_metric: str = "accuracy"
    lspin: lspin_mod.LspinConfig = field(default_factory=lspin_mod.LspinConfig)
    dann: dann_mod.DannConfig = field(default_factory=dann_mod.DannConfig)

    def __post_init__(self):
        if isinstance(self.lspin, dict):
            self.lspin = lspin_mod.LspinConfig(**self.lspin)
        if isinstance(self.dann, dict):
            self.dann = dann_mod.DannConfig(**self.dann)
        problems = self.problems()
        if problems:
            raise ConfigError("invalid training config:\n  " + "\n  ".join(problems))

    def problems(self):
        out = []
        if self.model not in MODELS:
            out.append(f"model must be one of {MODELS}, got {self.model!r}")
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0):
            out.append(f"learning_rate must be > 0, got {self.learning_rate!r}")
        if not (isinstance(self.epochs, int) and self.epochs >= 1):
            out.append(f"epochs must be an integer >= 1, got {self.epochs!r}")
        if self.batch_size is not None and not (isinstance(self.batch_size, int)
                                                and self.batch_size >= 1):
            out.append(f"batch_size must be a positive integer or null, got {self.batch_size!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            out.append(f"seed must be an integer in [0, 2**64), got {self.seed!r}")
        if self.validation_metric not in ("accuracy", "macro_f1"):
            out.append(f"validation_metric must be accuracy or macro_f1, got "
                       f"{self.validation_metric!r}")
        return out

    def to_dict(self):
        d = asdict(self)
        d["lspin"]["prediction_widths"] = list(self.lspin.prediction_widths)
        d["lspin"]["gating_widths"] = list(self.lspin.gating_widths)
        d["dann"]["feature_widths"] = list(self.dann.feature_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid model block: {exc}") from None

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(d)


def default_config(model):
    path = Path(__file__).parent / "configs" / f"{model}_default.json"
    return TrainConfig.load(path)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    validation_metric: float
    open_gate_fraction: float = float("nan")
    domain_loss: float = float("nan")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, record):
        self.records.append(record)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fields = list(EpochRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(fields)
            for rec in self.records:
                writer.writerow([rec.epoch] + [repr(float(getattr(rec, f))) for f in fields[1:]])
        return path

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), *(float(r[f]) for f in
                                                     list(EpochRecord.__dataclass_fields__)[1:]))
                    for r in rows])


def sgd_step(params, grads, lr, where=""):
    """``p <- p - lr * g`` for each parameter; refuses non-finite gradients."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient {where}".strip())
    for p, g in zip(params, grads):
        p.data = p.data - lr * g
    return params


# Checkpoints

def _dump_block(block):
    return [[{"name": p.name, "shape": list(p.shape), "data": p.data.ravel().tolist()}
             for p in layer] for layer in block]


def _load_block(block):
    return [[nd.Tensor(np.array(t["data"], dtype=np.float64).reshape(t["shape"]),
                       requires_grad=True, name=t["name"]) for t in layer] for layer in block]


def make_checkpoint(model, params, config, feature_names, norm_stats_ref=None, extra=None):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "library_version": __version__,
        "model": model,
        "blocks": {k: _dump_block(v) for k, v in params.blocks().items()},
        "lambda_adv": getattr(params, "lambda_adv", None),
        "config": config.to_dict(),
        "schema": {"names": list(feature_names), "hash": schema_hash(feature_names)},
        "norm_stats": norm_stats_ref,
        "extra": extra or {},
    }


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(ckpt) + "\n")
    return path


def load_checkpoint(path):
    ckpt = json.loads(Path(path).read_text())
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a checkpoint file")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def params_from_checkpoint(ckpt):
    blocks = {k: _load_block(v) for k, v in ckpt["blocks"].items()}
    if ckpt["model"] == "dann":
        return dann_mod.DannParams(blocks["theta_f"], blocks["theta_y"], blocks["theta_d"],
                                   ckpt["lambda_adv"])
    return lspin_mod.LspinParams(blocks["theta"], blocks["omega"])


# Evaluation helpers used during training

def target_labels(model, dataset):
    return dataset.dendrite if model == "dann" else dataset.subclass


def predict(model, params, X):
    if model == "dann":
        return dann_mod.predict_broad_type(params, X)
    return lspin_mod.predict_subclass(params, X)


def score(model, params, dataset, metric, n_classes):
    from .evalkit import confusion, macro_scores

    y = target_labels(model, dataset)
    pred = predict(model, params, dataset.X)
    if metric == "accuracy":
        return float(np.mean(pred == y))
    return macro_scores(confusion(y, pred, n_classes), warn=False).macro_f1


def _check_labels(model, dataset, config, name):
    y = target_labels(model, dataset)
    semi = model == "dann" and config.dann.semi_supervised
    if len(dataset) and np.any(y < 0) and not (semi and name == "train"):
        field_name = "dendrite_type" if model == "dann" else "subclass"
        raise ConfigError(f"{name} split has {int(np.sum(y < 0))} samples without {field_name}")
    if model == "dann" and len(dataset) and np.any(dataset.domain < 0):
        raise ConfigError(f"{name} split has samples without organism (domain) labels")


def train(config, splits, norm_stats_ref=None, log=None):
    """Train ``config.model`` on ``splits["train"]``.

    Returns ``(result, history)``; ``result`` holds ``final`` and ``best``
    checkpoints (best by validation metric, ties to the earliest epoch; equal
    to ``final`` when there is no validation split).
    """
    model = config.model
    train_set = splits["train"]
    val_set = splits.get("validation")
    if len(train_set) == 0:
        raise ConfigError("training split is empty")
    _check_labels(model, train_set, config, "train")
    if val_set is not None and len(val_set):
        _check_labels(model, val_set, config, "validation")
    else:
        val_set = None

    rng = np.random.default_rng(config.seed)
    n_features = train_set.X.shape[1]
    if model == "dann":
        params = dann_mod.init_dann(rng, n_features, config.dann)
        n_classes = config.dann.n_classes
    else:
        params = lspin_mod.init_lspin(rng, n_features, config.lspin)
        n_classes = config.lspin.n_classes

    X = train_set.X
    y = target_labels(model, train_set)
    domains = train_set.domain
    n = len(X)
    batch = n if config.batch_size is None else min(config.batch_size, n)
    history = TrainHistory()
    best = (-np.inf, None)
    lr = config.learning_rate

    for epoch in range(1, config.epochs + 1):
        order = np.arange(n) if batch == n else rng.permutation(n)
        losses, dlosses, sizes = [], [], []
        try:
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                if model == "dann":
                    params.lambda_adv = config.dann.lambda_at(epoch - 1)
                    params, ly, ld = dann_mod.dann_train_step(params, X[idx], y[idx],
                                                              domains[idx], lr)
                    losses.append(ly - params.lambda_adv * ld)
                    dlosses.append(ld)
                else:
                    plist = params.parameters()
                    nd.zero_grads(plist)
                    loss, _ = lspin_mod.lspin_loss(params, X[idx], y[idx], config.lspin, rng=rng)
                    nd.backward(loss)
                    sgd_step(plist, [p.grad for p in plist], lr,
                             where=f"at epoch {epoch}, step {start // batch}")
                    losses.append(loss.item())
                sizes.append(len(idx))
        except NonFiniteError as exc:
            raise DivergenceError(f"training diverged at epoch {epoch}: {exc}", history) from None
        train_loss = float(np.average(losses, weights=sizes))
        if not np.isfinite(train_loss):
            raise DivergenceError(f"training loss is not finite at epoch {epoch}", history)
        if model == "dann":
            params.lambda_adv = config.dann.lambda_adv
        metric_set = val_set if val_set is not None else train_set
        metric = score(model, params, metric_set, config.validation_metric, n_classes)
        record = EpochRecord(epoch, train_loss, metric)
        if model == "dann":
            record.domain_loss = float(np.average(dlosses, weights=sizes))
        else:
            record.open_gate_fraction = lspin_mod.open_gate_fraction(params, X)
        history.append(record)
        if val_set is not None and metric > best[0]:
            best = (metric, make_checkpoint(model, params, config, train_set.feature_names,
                                            norm_stats_ref, {"epoch": epoch}))
        if log is not None:
            log(record)

    final = make_checkpoint(model, params, config, train_set.feature_names, norm_stats_ref,
                            {"epoch": config.epochs})
    return {"final": final, "best": best[1] if best[1] is not None else final,
            "params": params}, history
