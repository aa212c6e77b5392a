"""Domain-adversarial classifier for excitatory/inhibitory typing across organisms.

A shared feature extractor feeds a label head and a domain head. Training
minimizes the label loss while the extractor is pushed to maximize the domain
loss through a gradient reversal layer; the domain head itself descends its
own loss at a learning rate scaled by ``lambda_adv``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .errors import ConfigError, NonFiniteError, ShapeError


@dataclass
class DannConfig:
    feature_widths: tuple = (64, 32)
    n_classes: int = 2
    n_domains: int = 2
    lambda_adv: float = 1.0
    # Linear ramp from 0 to lambda_adv over this many epochs; 0 keeps it constant.
    warmup_epochs: int = 0
    semi_supervised: bool = False

    def __post_init__(self):
        self.feature_widths = tuple(int(w) for w in self.feature_widths)
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv must be >= 0")
        if not self.feature_widths:
            raise ConfigError("feature extractor needs at least one layer")

    def lambda_at(self, epoch):
        if self.warmup_epochs <= 0:
            return self.lambda_adv
        return self.lambda_adv * min(1.0, epoch / self.warmup_epochs)


@dataclass
class DannParams:
    theta_f: list
    theta_y: list
    theta_d: list
    lambda_adv: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv must be >= 0")
        blocks = [nd.flatten(b) for b in (self.theta_f, self.theta_y, self.theta_d)]
        ids = [id(p) for block in blocks for p in block]
        if len(ids) != len(set(ids)):
            raise ConfigError("parameter blocks must not share tensors")

    def blocks(self):
        return {"theta_f": self.theta_f, "theta_y": self.theta_y, "theta_d": self.theta_d}

    def parameters(self):
        return nd.flatten(self.theta_f) + nd.flatten(self.theta_y) + nd.flatten(self.theta_d)

    def copy(self):
        def clone(block):
            return [[nd.Tensor(p.data.copy(), requires_grad=True, name=p.name) for p in layer]
                    for layer in block]
        return DannParams(clone(self.theta_f), clone(self.theta_y), clone(self.theta_d),
                          self.lambda_adv, dict(self.meta))


def init_dann(rng, n_features, config=None):
    config = config or DannConfig()
    widths = (n_features,) + config.feature_widths
    theta_f = nd.init_mlp(rng, widths, name="f")
    theta_y = nd.init_mlp(rng, (widths[-1], config.n_classes), name="y")
    theta_d = nd.init_mlp(rng, (widths[-1], config.n_domains), name="d")
    return DannParams(theta_f, theta_y, theta_d, config.lambda_adv)


def features_of(params, features):
    x = nd.as_tensor(features)
    n_in = params.theta_f[0][0].shape[0]
    if x.data.ndim != 2 or x.shape[1] != n_in:
        raise ShapeError(f"dann: expected features of shape (N, {n_in}), got {x.shape}")
    return nd.mlp(params.theta_f, x, activate_last=True)


def dann_forward(params, features):
    """Return ``(label_logits, domain_logits, representation)`` as graph nodes."""
    rep = features_of(params, features)
    return nd.mlp(params.theta_y, rep), nd.mlp(params.theta_d, rep), rep


def _label_rows(batch_labels):
    labels = np.asarray(batch_labels)
    return np.flatnonzero(labels >= 0)


def _label_loss(logits, labels):
    rows = _label_rows(labels)
    if len(rows) == 0:
        raise ConfigError("batch has no labeled samples")
    if len(rows) == len(labels):
        return nd.softmax_cross_entropy(logits, labels)
    picked = nd.matmul(nd.Tensor(np.eye(len(labels))[rows]), logits)
    return nd.softmax_cross_entropy(picked, np.asarray(labels)[rows])


def head_losses(params, features, labels, domains):
    """Mean label loss and mean domain loss for one batch, both as graph nodes."""
    if len(features) == 0:
        raise ShapeError("dann: empty batch")
    y_logits, d_logits, _ = dann_forward(params, features)
    return _label_loss(y_logits, labels), nd.softmax_cross_entropy(d_logits, domains)


def dann_objective(params, features, labels, domains):
    """``E = mean label loss - lambda_adv * mean domain loss``."""
    loss_y, loss_d = head_losses(params, features, labels, domains)
    return loss_y - params.lambda_adv * loss_d


def _check_finite(grads, where):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name} {where}")


def explicit_gradients(params, features, labels, domains):
    """Per-block gradients of each head loss, from two separate backward passes.

    Returns ``(dLy, dLd)``; each maps parameter index (in ``params.parameters()``
    order) to its gradient. Entries for blocks a loss does not touch are zero.
    """
    plist = params.parameters()
    out = []
    for which in (0, 1):
        nd.zero_grads(plist)
        loss = head_losses(params, features, labels, domains)[which]
        nd.backward(loss)
        out.append([p.grad.copy() for p in plist])
    nd.zero_grads(plist)
    return out


def explicit_step(params, features, labels, domains, lr):
    """One step of the three update rules, applied block by block.

    theta_f <- theta_f - lr * (dLy/dtheta_f - lambda * dLd/dtheta_f)
    theta_y <- theta_y - lr * dLy/dtheta_y
    theta_d <- theta_d - lr * lambda * dLd/dtheta_d
    """
    lam = params.lambda_adv
    g_y, g_d = explicit_gradients(params, features, labels, domains)
    _check_finite({i: g for i, g in enumerate(g_y + g_d)}, "in explicit DANN step")
    new = params.copy()
    n_f = len(nd.flatten(params.theta_f))
    n_y = len(nd.flatten(params.theta_y))
    for i, p in enumerate(new.parameters()):
        if i < n_f:
            p.data = p.data - lr * (g_y[i] - lam * g_d[i])
        elif i < n_f + n_y:
            p.data = p.data - lr * g_y[i]
        else:
            p.data = p.data - lr * lam * g_d[i]
    return new


def grl_gradients(params, features, labels, domains):
    """Gradients of ``Ly + Ld(GRL(G_f(x)))`` from a single backward pass.

    The reversal layer hands the extractor ``-lambda * dLd/dG_f``; the domain
    head receives the plain ``dLd/dtheta_d``.
    """
    rep = features_of(params, features)
    y_logits = nd.mlp(params.theta_y, rep)
    d_logits = nd.mlp(params.theta_d, nd.reverse_gradient(rep, params.lambda_adv))
    loss_y = _label_loss(y_logits, labels)
    loss_d = nd.softmax_cross_entropy(d_logits, domains)
    plist = params.parameters()
    nd.zero_grads(plist)
    nd.backward(loss_y + loss_d)
    grads = [p.grad.copy() for p in plist]
    nd.zero_grads(plist)
    return grads, loss_y.item(), loss_d.item()


def dann_train_step(params, features, labels, domains, lr):
    """GRL-based update; returns ``(new_params, label_loss, domain_loss)``.

    Matches :func:`explicit_step` exactly: the extractor gradient already
    carries the reversed domain term, and the domain head's step is scaled by
    ``lambda_adv``.
    """
    grads, loss_y, loss_d = grl_gradients(params, features, labels, domains)
    _check_finite({p.name: g for p, g in zip(params.parameters(), grads)}, "in DANN step")
    new = params.copy()
    n_fy = len(nd.flatten(params.theta_f)) + len(nd.flatten(params.theta_y))
    for i, (p, g) in enumerate(zip(new.parameters(), grads)):
        rate = lr if i < n_fy else lr * params.lambda_adv
        p.data = p.data - rate * g
    return new, loss_y, loss_d


def predict_broad_type(params, features):
    """0 = excitatory, 1 = inhibitory; ties go to class 0."""
    y_logits, _, _ = dann_forward(params, features)
    return np.argmax(y_logits.data, axis=1)


def predict_logits(params, features):
    y_logits, d_logits, rep = dann_forward(params, features)
    return y_logits.data, d_logits.data, rep.data


def probe_domain_accuracy(representation, domains, seed=0, hidden=16, epochs=300, lr=0.5,
                          holdout=0.3):
    """Held-out accuracy of a fresh one-hidden-layer probe predicting the domain.

    The probe is trained full-batch with plain gradient descent on the frozen
    representation; chance level is the majority-domain rate.
    """
    rng = np.random.default_rng(seed)
    Z = np.asarray(representation, dtype=np.float64)
    d = np.asarray(domains)
    order = rng.permutation(len(Z))
    n_test = int(round(holdout * len(Z)))
    test, train = order[:n_test], order[n_test:]
    mu, sd = Z[train].mean(axis=0), Z[train].std(axis=0)
    sd[sd == 0] = 1.0
    Z = (Z - mu) / sd
    layers = nd.init_mlp(rng, (Z.shape[1], hidden, int(d.max()) + 1), name="probe")
    params = nd.flatten(layers)
    for _ in range(epochs):
        nd.zero_grads(params)
        nd.backward(nd.softmax_cross_entropy(nd.mlp(layers, Z[train]), d[train]))
        for p in params:
            p.data = p.data - lr * p.grad
    pred = np.argmax(nd.mlp(layers, Z[test]).data, axis=1)
    return float(np.mean(pred == d[test]))
