"""Tabular ingestion, Cre-line grouping, splitting, normalization and
synthetic verification datasets."""
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, IngestionError, SchemaError, SplitError

_RAW_FEATURES = """
threshold v noise, threshold i noise, peak v noise, peak i noise,
trough v noise, trough i noise, upstroke ratio noise, upstroke v noise,
downstroke ratio noise, downstroke v noise, fast trough v noise,
fast trough i noise, width noise, up-down ratio noise, f-i curve slope noise,
fast trough v long square, fast trough v ramp, fast trough v short square,
input resistance mohm, latency, peak v long square, peak v ramp,
peak v short square, ri, sag, seal gohm, tau, threshold i long square,
threshold i ramp, threshold i short square, threshold v long square,
threshold v ramp, threshold v short square, trough v long square,
trough v ramp, trough v short square, up-down ratio long square,
up-down ratio ramp, up-down ratio short square, vm for sag, vrest
"""

FEATURE_NAMES = tuple(
    name.strip().lower().replace(" ", "_")
    for name in _RAW_FEATURES.replace("\n", " ").split(",")
)

SUBCLASSES = ("Glutamatergic", "Htr3a", "Pvalb", "Sst", "Vip")
BROAD_TYPES = ("excitatory", "inhibitory")
ORGANISMS = ("mouse", "human")  # index doubles as the domain label: 0 source, 1 target

DEFAULT_DENDRITE_MAP = {
    "spiny": 0,
    "excitatory": 0,
    "0": 0,
    "aspiny": 1,
    "sparsely spiny": 1,
    "inhibitory": 1,
    "1": 1,
}

_ORGANISM_ALIASES = {
    "mouse": "mouse",
    "mus musculus": "mouse",
    "human": "human",
    "homo sapiens": "human",
}

LABEL_COLUMNS = ("sample_id", "organism", "dendrite_type", "cre_line", "subclass")


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple = FEATURE_NAMES

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        if not names:
            raise SchemaError("feature schema is empty")

    def __len__(self):
        return len(self.names)

    @property
    def hash(self):
        return schema_hash(self.names)

    @classmethod
    def from_file(cls, path):
        names = json.loads(Path(path).read_text())
        if isinstance(names, dict):
            names = names["names"]
        return cls(tuple(names))


def schema_hash(names):
    return hashlib.sha256("\n".join(names).encode()).hexdigest()[:16]


@dataclass
class Dataset:
    """Column-oriented sample table.

    Missing labels are encoded as ``-1`` (integer fields) or ``""`` (strings).
    """

    X: np.ndarray
    feature_names: tuple = FEATURE_NAMES
    organism: np.ndarray = None
    dendrite: np.ndarray = None
    cre_line: np.ndarray = None
    subclass: np.ndarray = None
    sample_id: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1, len(self.feature_names))
        n = len(self.X)
        if self.organism is None:
            self.organism = np.full(n, "", dtype=object)
        if self.dendrite is None:
            self.dendrite = np.full(n, -1, dtype=np.int64)
        if self.cre_line is None:
            self.cre_line = np.full(n, "", dtype=object)
        if self.subclass is None:
            self.subclass = np.full(n, -1, dtype=np.int64)
        if self.sample_id is None:
            self.sample_id = np.array([str(i) for i in range(n)], dtype=object)
        self.organism = np.asarray(self.organism, dtype=object)
        self.cre_line = np.asarray(self.cre_line, dtype=object)
        self.sample_id = np.asarray(self.sample_id, dtype=object)
        self.dendrite = np.asarray(self.dendrite, dtype=np.int64)
        self.subclass = np.asarray(self.subclass, dtype=np.int64)

    def __len__(self):
        return len(self.X)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            X=self.X[idx], feature_names=self.feature_names,
            organism=self.organism[idx], dendrite=self.dendrite[idx],
            cre_line=self.cre_line[idx], subclass=self.subclass[idx],
            sample_id=self.sample_id[idx], meta=dict(self.meta),
        )

    def with_features(self, X):
        return replace(self, X=np.asarray(X, dtype=np.float64), meta=dict(self.meta))

    @property
    def domain(self):
        """0 for mouse (source), 1 for human (target), -1 when unknown."""
        return np.array([ORGANISMS.index(o) if o in ORGANISMS else -1 for o in self.organism],
                        dtype=np.int64)

    def labels(self, field_name):
        if field_name == "subclass":
            return self.subclass
        if field_name in ("dendrite", "dendrite_type"):
            return self.dendrite
        if field_name == "organism":
            return self.domain
        raise ConfigError(f"unknown label field {field_name!r}")


def _parse_dendrite(values, mapping):
    out = np.full(len(values), -1, dtype=np.int64)
    for i, v in enumerate(values):
        key = str(v).strip().lower()
        if key in ("", "nan", "none"):
            continue
        if key not in mapping:
            raise IngestionError(f"row {i}: unknown dendrite_type {v!r}")
        out[i] = mapping[key]
    return out


def _parse_subclass(values):
    lookup = {name.lower(): i for i, name in enumerate(SUBCLASSES)}
    out = np.full(len(values), -1, dtype=np.int64)
    for i, v in enumerate(values):
        key = str(v).strip().lower()
        if key in ("", "nan", "none"):
            continue
        if key not in lookup:
            raise IngestionError(f"row {i}: unknown subclass {v!r}")
        out[i] = lookup[key]
    return out


def _to_float(cell):
    try:
        return float(cell)
    except ValueError:
        return np.nan


def load_table(path, schema=None, dendrite_map=None):
    """Read a feature CSV into a :class:`Dataset`.

    Every schema column must be present. Cells that do not parse as numbers
    become NaN; the row count is preserved.
    """
    schema = schema or FeatureSchema()
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, comment="#")
    except pd.errors.EmptyDataError:
        raise IngestionError(f"{path}: empty file") from None
    if df.columns.empty:
        raise IngestionError(f"{path}: empty file")
    missing = [name for name in schema.names if name not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing feature columns: {', '.join(missing)}")
    X = np.array([[_to_float(cell) for cell in row]
                  for row in df[list(schema.names)].itertuples(index=False)],
                 dtype=np.float64).reshape(len(df), len(schema))
    n = len(df)

    def column(name):
        if name not in df.columns:
            return None
        return df[name].fillna("").astype(str).str.strip().to_numpy(dtype=object)

    organism = column("organism")
    if organism is not None:
        organism = np.array([_ORGANISM_ALIASES.get(o.lower(), o.lower()) for o in organism],
                            dtype=object)
    dendrite = column("dendrite_type")
    if dendrite is not None:
        dendrite = _parse_dendrite(dendrite, dendrite_map or DEFAULT_DENDRITE_MAP)
    subclass = column("subclass")
    if subclass is not None:
        subclass = _parse_subclass(subclass)
    sample_id = column("sample_id")
    if sample_id is None:
        sample_id = np.array([str(i) for i in range(n)], dtype=object)
    return Dataset(X=X, feature_names=schema.names, organism=organism, dendrite=dendrite,
                   cre_line=column("cre_line"), subclass=subclass, sample_id=sample_id,
                   meta={"source": str(path)})


def save_table(dataset, path):
    """Write ``dataset`` in the ingestion CSV schema; NaN cells are left empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame({
        "sample_id": dataset.sample_id,
        "organism": dataset.organism,
        "dendrite_type": ["" if d < 0 else ("spiny" if d == 0 else "aspiny")
                          for d in dataset.dendrite],
        "cre_line": dataset.cre_line,
        "subclass": ["" if s < 0 else SUBCLASSES[s] for s in dataset.subclass],
    })
    features = pd.DataFrame(dataset.X, columns=list(dataset.feature_names))
    df = pd.concat([df, features], axis=1)
    df.to_csv(path, index=False, float_format="%.17g", na_rep="", lineterminator="\n")
    return path


def feature_columns_of(path):
    """Feature column names of a CSV header (all non-label columns, in order)."""
    try:
        header = pd.read_csv(path, nrows=0, comment="#").columns
    except pd.errors.EmptyDataError:
        raise IngestionError(f"{path}: file is empty") from None
    return tuple(c for c in header if c not in LABEL_COLUMNS)


def load_cre_map(path):
    """Read a ``{cre_line: subclass}`` JSON object (or ``{subclass: [lines]}``)."""
    raw = json.loads(Path(path).read_text())
    raw = raw.get("mapping", raw)
    mapping = {}
    raw = {k: v for k, v in raw.items() if k != "comment"}
    for key, value in raw.items():
        if isinstance(value, list):
            for line in value:
                mapping[line] = key
        else:
            mapping[key] = value
    return mapping


def default_cre_map():
    return load_cre_map(Path(__file__).parent / "configs" / "cre_map.json")


def group_cre_lines(dataset, mapping):
    """Attach a subclass to every sample whose Cre line is mapped; drop the rest.

    The number of dropped samples is stored in ``meta["unmapped_dropped"]``.
    """
    if not mapping:
        raise ConfigError("Cre-line mapping is empty")
    lookup = {}
    for line, sub in mapping.items():
        matches = [s for s in SUBCLASSES if s.lower() == str(sub).lower()]
        if not matches:
            raise ConfigError(f"Cre line {line!r} maps to unknown subclass {sub!r}")
        lookup[line.strip()] = SUBCLASSES.index(matches[0])
    subclass = np.array([lookup.get(str(c).strip(), -1) for c in dataset.cre_line],
                        dtype=np.int64)
    keep = np.flatnonzero(subclass >= 0)
    out = dataset.take(keep)
    out.subclass = subclass[keep]
    out.meta["unmapped_dropped"] = dataset.meta.get("unmapped_dropped", 0) + len(dataset) - len(keep)
    return out


def exclude_nan(dataset):
    keep = np.flatnonzero(np.isfinite(dataset.X).all(axis=1))
    return dataset.take(keep), len(dataset) - len(keep)


@dataclass(frozen=True)
class SplitSpec:
    """Either fractions summing to 1 or integer counts summing to the dataset size."""

    train: float
    validation: float = 0
    test: float = 0
    seed: int = 0
    stratify_on: str = None

    @classmethod
    def parse(cls, text, seed=0, stratify_on=None):
        parts = [float(p) for p in text.replace(",", "/").split("/")]
        if len(parts) == 2:
            parts = [parts[0], 0.0, parts[1]]
        if len(parts) != 3:
            raise SplitError(f"expected train/val/test or train/test, got {text!r}")
        return cls(*parts, seed=seed, stratify_on=stratify_on)

    def counts(self, n):
        parts = np.array([self.train, self.validation, self.test], dtype=np.float64)
        if np.any(parts < 0):
            raise SplitError(f"negative split size in {parts.tolist()}")
        if np.all(parts <= 1.0) and abs(parts.sum() - 1.0) < 1e-9:
            ideal = parts * n
            counts = np.floor(ideal).astype(np.int64)
            order = np.argsort(-(ideal - counts), kind="stable")
            counts[order[: n - counts.sum()]] += 1
            return tuple(int(c) for c in counts)
        if np.any(parts != np.round(parts)) or parts.sum() != n:
            raise SplitError(f"split sizes {parts.tolist()} are not fractions summing to 1 "
                             f"nor counts summing to {n}")
        return tuple(int(c) for c in parts)


def _allocate(sizes, totals):
    """Integer matrix ``a[c, s]`` with row sums ``sizes`` and column sums ``totals``
    where every entry is the floor or ceiling of ``sizes[c] * totals[s] / n``.

    Starts from the floors and distributes the missing units through a max-flow
    over the entries with a fractional part, which always succeeds.
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import maximum_flow

    sizes, totals = np.asarray(sizes), np.asarray(totals)
    ideal = np.outer(sizes, totals) / sizes.sum()
    alloc = np.floor(ideal + 1e-9).astype(np.int64)
    row_gap = sizes - alloc.sum(axis=1)
    col_gap = totals - alloc.sum(axis=0)
    if row_gap.sum() == 0:
        return alloc
    k, s = alloc.shape
    source, sink = k + s, k + s + 1
    cap = np.zeros((k + s + 2, k + s + 2), dtype=np.int32)
    cap[source, :k] = row_gap
    cap[k:k + s, sink] = col_gap
    cap[:k, k:k + s] = (ideal - alloc) > 1e-9
    flow = maximum_flow(csr_matrix(cap), source, sink).flow.toarray()
    if flow[source].sum() != row_gap.sum():
        raise SplitError("could not allocate stratified split sizes")
    return alloc + flow[:k, k:k + s]


def split(dataset, spec):
    """Seeded stratified partition into ``{"train", "validation", "test"}``.

    Each stratum gets the floor or ceiling of its proportional share of every
    split while the split sizes stay exact; members of a stratum are shuffled
    before being dealt out.
    """
    n = len(dataset)
    counts = spec.counts(n)
    rng = np.random.default_rng(spec.seed)
    strata = (dataset.labels(spec.stratify_on) if spec.stratify_on
              else np.zeros(n, dtype=np.int64))
    values = np.unique(strata)
    members = [np.flatnonzero(strata == v) for v in values]
    alloc = _allocate([len(m) for m in members], counts)
    parts = [[], [], []]
    for group, row in zip(members, alloc):
        group = group[rng.permutation(len(group))]
        for j, chunk in enumerate(np.split(group, np.cumsum(row)[:-1])):
            parts[j].append(chunk)
    names = ("train", "validation", "test")
    return {name: dataset.take(np.sort(np.concatenate(p).astype(np.int64)))
            for name, p in zip(names, parts)}


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    feature_names: tuple = FEATURE_NAMES

    @property
    def constant(self):
        return self.std == 0.0

    def to_dict(self):
        return {
            "format": "neurotype-normstats",
            "version": 1,
            "feature_names": list(self.feature_names),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "constant": [n for n, c in zip(self.feature_names, self.constant) if c],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]), tuple(d["feature_names"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_normalize(train):
    X = train.X
    if len(X) == 0:
        raise SplitError("cannot fit normalization on an empty training split")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std <= 1e-12 * np.maximum(1.0, np.abs(mean))] = 0.0
    return NormStats(mean, std, tuple(train.feature_names))


def apply_normalize(dataset, stats):
    safe = np.where(stats.constant, 1.0, stats.std)
    Z = (dataset.X - stats.mean) / safe
    Z[:, stats.constant] = 0.0
    return dataset.with_features(Z)


# Synthetic data

def blobs_bayes_accuracy(classes, separation):
    """Bayes accuracy when class k has mean ``separation * e_k`` and unit noise.

    The nearest-mean rule is correct iff the own coordinate exceeds all others,
    giving ``integral phi(t - s) * Phi(t)**(K-1) dt``.
    """
    from scipy import integrate, stats

    if separation == 0:
        return 1.0 / classes
    value, _ = integrate.quad(
        lambda t: stats.norm.pdf(t - separation) * stats.norm.cdf(t) ** (classes - 1),
        -np.inf, np.inf)
    return value


def synth_blobs(n=600, d_informative=5, d_noise=36, classes=5, separation=4.0, seed=0):
    """Class-conditional Gaussians whose means differ only on informative coordinates.

    Class ``k`` has mean ``separation`` on the ``k``-th informative coordinate
    (cycling when there are more classes than informative coordinates) and 0
    elsewhere; every coordinate carries unit-variance noise. The informative
    coordinates sit at seeded random positions recorded in
    ``meta["informative_idx"]``. Labels go into ``subclass``.
    """
    d = d_informative + d_noise
    if not 2 <= classes <= len(SUBCLASSES):
        raise ConfigError(f"classes must be in [2, {len(SUBCLASSES)}]")
    if d_informative < 1:
        raise ConfigError("need at least one informative feature")
    rng = np.random.default_rng(seed)
    informative = np.sort(rng.permutation(d)[:d_informative])
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    X = rng.standard_normal((n, d))
    X[np.arange(n), informative[labels % d_informative]] += separation
    names = FEATURE_NAMES if d == len(FEATURE_NAMES) else tuple(f"f{i}" for i in range(d))
    return Dataset(
        X=X, feature_names=names, organism=np.full(n, "mouse", dtype=object),
        subclass=labels, meta={
            "task": "blobs", "seed": seed, "classes": classes, "separation": separation,
            "informative_idx": informative.tolist(),
            "informative_names": [names[i] for i in informative],
            "bayes_accuracy": blobs_bayes_accuracy(classes, separation)
            if classes <= d_informative else None,
        })


def synth_shifted_domains(n_source=500, n_target=500, shift=1.0, seed=0,
                          d_informative=5, d_noise=36, separation=2.0):
    """Binary labels (dendrite field) in a source (mouse) and target (human) domain.

    Source class ``c`` is ``N(+-separation * w, I)`` with ``w`` a unit vector
    over the informative coordinates. The target reuses the same labels and
    the generative parameters under an affine map: coordinate scale
    ``a = 1 + 0.5 * shift * u`` (``u`` uniform on [0, 1]) and offset
    ``b = shift * v`` (``v`` standard normal), so target class ``c`` is
    ``N(a * m_c + b, diag(a**2))``.
    """
    d = d_informative + d_noise
    rng = np.random.default_rng(seed)
    informative = np.sort(rng.permutation(d)[:d_informative])
    w = np.zeros(d)
    w[informative] = rng.standard_normal(d_informative)
    w /= np.linalg.norm(w)
    scale = 1.0 + 0.5 * shift * rng.random(d)
    offset = shift * rng.standard_normal(d)

    def draw(count, target):
        y = np.arange(count) % 2
        y = y[rng.permutation(count)]
        X = rng.standard_normal((count, d)) + np.where(y[:, None] == 1, 1.0, -1.0) * separation * w
        if target:
            X = X * scale + offset
        return X, y

    Xs, ys = draw(n_source, False)
    Xt, yt = draw(n_target, True)
    names = FEATURE_NAMES if d == len(FEATURE_NAMES) else tuple(f"f{i}" for i in range(d))
    return Dataset(
        X=np.vstack([Xs, Xt]), feature_names=names,
        organism=np.array(["mouse"] * n_source + ["human"] * n_target, dtype=object),
        dendrite=np.concatenate([ys, yt]),
        meta={
            "task": "shift", "seed": seed, "shift": shift, "separation": separation,
            "domains_identical": shift == 0,
            "informative_idx": informative.tolist(),
            "label_direction": w.tolist(),
            "target_scale": scale.tolist(),
            "target_offset": offset.tolist(),
        })
