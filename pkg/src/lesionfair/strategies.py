"""Base, reinforcing and adversarial training on a one-hidden-layer network.

The network is a shared ReLU encoder with two logistic heads, one for the
diagnosis and one for patient sex.  Gradients are derived by hand.

* ``base``: only the diagnosis loss is minimised; the sex head is idle.
* ``reinforce``: diagnosis and sex losses are summed with equal weight.
* ``adversarial``: the sex head minimises its loss while the encoder gets
  the sex-loss gradient reversed and scaled by ``lam`` on top of the
  diagnosis gradient.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .cohort import make_rng
from .errors import TrainingError, ValidationError
from .fairness_eval import auc_score

EPS = 1e-12
ENCODER = ("W1", "b1")
DIAG_HEAD = ("w_diag", "b_diag")
SEX_HEAD = ("w_sex", "b_sex")
PARAMS = ENCODER + DIAG_HEAD + SEX_HEAD


class Strategy(str, enum.Enum):
    BASE = "base"
    REINFORCE = "reinforce"
    ADVERSARIAL = "adversarial"


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce(y, y_hat) -> np.ndarray:
    """Elementwise binary cross-entropy with probabilities clamped to [EPS, 1-EPS]."""
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("bce labels must be 0 or 1")
    p = np.clip(np.asarray(y_hat, dtype=float), EPS, 1.0 - EPS)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    # log(1 - EPS) is not exactly 0; a clamped perfect prediction should be
    return np.where(((y == 1) & (p >= 1.0 - EPS)) | ((y == 0) & (p <= EPS)), 0.0, loss)


def bce_sum(y, y_hat) -> float:
    return float(np.sum(bce(y, y_hat)))


def bce_mean(y, y_hat) -> float:
    return float(np.mean(bce(y, y_hat)))


def bias_loss(l_c: float, lam: float) -> float:
    """Adversarial penalty: the sex-head loss weighted by ``lam``."""
    return lam * l_c


@dataclass
class Examples:
    features: np.ndarray
    y: np.ndarray
    a: np.ndarray
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise ValidationError("features must be a 2-d array")
        self.y = np.asarray(self.y, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        n = self.features.shape[0]
        if self.y.shape != (n,) or self.a.shape != (n,):
            raise ValidationError("labels must match the number of feature rows")
        for name, arr in (("y", self.y), ("a", self.a)):
            if not np.all((arr == 0) | (arr == 1)):
                raise ValidationError(f"{name} labels must be binary")
        if not self.ids:
            self.ids = tuple(f"ex{i:06d}" for i in range(n))

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "Examples":
        idx = np.asarray(idx, dtype=int)
        return Examples(self.features[idx], self.y[idx], self.a[idx], tuple(self.ids[i] for i in idx))


@dataclass
class Network:
    W1: np.ndarray
    b1: np.ndarray
    w_diag: np.ndarray
    b_diag: np.ndarray
    w_sex: np.ndarray
    b_sex: np.ndarray

    @classmethod
    def init(cls, feature_dim: int, hidden_dim: int, seed: int) -> "Network":
        rng = make_rng(seed, 11)
        return cls(
            W1=rng.normal(0.0, math.sqrt(2.0 / feature_dim), (feature_dim, hidden_dim)),
            b1=np.zeros(hidden_dim),
            w_diag=rng.normal(0.0, math.sqrt(1.0 / hidden_dim), hidden_dim),
            b_diag=np.zeros(()),
            w_sex=rng.normal(0.0, math.sqrt(1.0 / hidden_dim), hidden_dim),
            b_sex=np.zeros(()),
        )

    @classmethod
    def zeros(cls, feature_dim: int, hidden_dim: int) -> "Network":
        return cls(
            np.zeros((feature_dim, hidden_dim)),
            np.zeros(hidden_dim),
            np.zeros(hidden_dim),
            np.zeros(()),
            np.zeros(hidden_dim),
            np.zeros(()),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAMS}

    def copy(self) -> "Network":
        return Network(**{k: np.array(v, copy=True) for k, v in self.params().items()})

    def snapshot_id(self) -> str:
        h = hashlib.sha256()
        for k in PARAMS:
            h.update(np.ascontiguousarray(getattr(self, k), dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def forward(net: Network, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encoder code ``z`` and clamped diagnosis / sex probabilities."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.W1.shape[0]:
        raise ValidationError(f"expected features of width {net.W1.shape[0]}, got shape {X.shape}")
    z = np.maximum(X @ net.W1 + net.b1, 0.0)
    y_hat = np.clip(sigmoid(z @ net.w_diag + net.b_diag), EPS, 1.0 - EPS)
    a_hat = np.clip(sigmoid(z @ net.w_sex + net.b_sex), EPS, 1.0 - EPS)
    return z, y_hat, a_hat


def head_losses(net: Network, batch: Examples) -> tuple[float, float]:
    """Mean diagnosis and sex cross-entropy over the batch."""
    _, y_hat, a_hat = forward(net, batch.features)
    return bce_mean(batch.y, y_hat), bce_mean(batch.a, a_hat)


@dataclass(frozen=True)
class StrategyConfig:
    strategy: Strategy = Strategy.BASE
    lam: float = 5.0
    learning_rate: float = 2.0e-5
    batch_size: int = 20
    max_epochs: int = 40
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0
    adversarial_mode: str = "joint"
    adversary_lr_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if not self.learning_rate >= 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValidationError("batch_size, max_epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValidationError("patience must not exceed max_epochs")
        if self.adversarial_mode not in ("joint", "alternating"):
            raise ValidationError(f"unknown adversarial_mode '{self.adversarial_mode}'")
        if not self.adversary_lr_scale > 0:
            raise ValidationError("adversary_lr_scale must be > 0")


def _head_grads(z, p, target, w):
    """Mean-BCE gradients of one logistic head and the upstream gradient at z."""
    d_logit = (p - target) / len(target)
    return z.T @ d_logit, np.asarray(d_logit.sum()), np.outer(d_logit, w)


def grad(net: Network, batch: Examples, config: StrategyConfig) -> dict[str, np.ndarray]:
    """Parameter update directions for one batch under ``config.strategy``.

    For ``base`` and ``reinforce`` these are true gradients of the mean
    diagnosis loss (plus mean sex loss for ``reinforce``).  For
    ``adversarial`` the encoder receives
    ``d L_diag / d enc - lam * d L_sex / d enc`` and the sex head its
    ordinary gradient.
    """
    X = batch.features
    pre = X @ net.W1 + net.b1
    z = np.maximum(pre, 0.0)
    # unclamped probabilities keep the derivative exact
    p_diag = sigmoid(z @ net.w_diag + net.b_diag)
    p_sex = sigmoid(z @ net.w_sex + net.b_sex)

    g = {}
    g["w_diag"], g["b_diag"], dz = _head_grads(z, p_diag, batch.y, net.w_diag)
    strategy = config.strategy
    if strategy is Strategy.BASE:
        g["w_sex"], g["b_sex"] = np.zeros_like(net.w_sex), np.zeros_like(net.b_sex)
    else:
        g["w_sex"], g["b_sex"], dz_sex = _head_grads(z, p_sex, batch.a, net.w_sex)
        if strategy is Strategy.REINFORCE:
            dz = dz + dz_sex
        elif config.lam != 0:
            dz = dz - config.lam * dz_sex

    d_pre = dz * (pre > 0)
    g["W1"] = X.T @ d_pre
    g["b1"] = d_pre.sum(axis=0)
    return g


def loss_components(net: Network, batch: Examples, config: StrategyConfig) -> dict[str, float]:
    """Scalar losses whose gradients ``grad`` combines (used by checks and logs)."""
    l_diag, l_sex = head_losses(net, batch)
    out = {"diag": l_diag, "sex": l_sex}
    if config.strategy is Strategy.REINFORCE:
        out["total"] = l_diag + l_sex
    elif config.strategy is Strategy.ADVERSARIAL:
        out["bias"] = bias_loss(l_sex, config.lam)
        out["total"] = l_diag - out["bias"]
    else:
        out["total"] = l_diag
    return out


def apply_update(net: Network, g: dict[str, np.ndarray], lr: float, keys=PARAMS) -> Network:
    for k in keys:
        setattr(net, k, getattr(net, k) - lr * g[k])
    return net


@dataclass
class TrainLog:
    strategy: str
    seed: int
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopping_epoch: int = 0
    stopped_early: bool = False
    snapshot_id: str = ""

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "stopping_epoch": self.stopping_epoch,
            "stopped_early": self.stopped_early,
            "snapshot_id": self.snapshot_id,
            "epochs": self.epochs,
        }


def train(net: Network, train_set: Examples, val_set: Examples, config: StrategyConfig) -> tuple[Network, TrainLog]:
    """Mini-batch gradient descent with early stopping on validation diagnosis loss.

    Returns the parameters of the best validation epoch.  Training stops
    once ``patience`` consecutive epochs fail to beat the best loss by
    ``min_delta``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValidationError("train and validation sets must be non-empty")
    net = net.copy()
    rng = make_rng(config.seed, 7)
    log = TrainLog(config.strategy.value, config.seed)
    best_loss, best_net, since_best = math.inf, net.copy(), 0
    adversarial = config.strategy is Strategy.ADVERSARIAL
    alternating = adversarial and config.adversarial_mode == "alternating"
    lr = config.learning_rate
    head_lr = lr * config.adversary_lr_scale if adversarial else lr

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), config.batch_size):
            batch = train_set.subset(order[start : start + config.batch_size])
            if alternating:
                # bias head first, then encoder and diagnosis head against the updated head
                apply_update(net, grad(net, batch, config), head_lr, SEX_HEAD)
                apply_update(net, grad(net, batch, config), lr, ENCODER + DIAG_HEAD)
            else:
                g = grad(net, batch, config)
                apply_update(net, g, lr, ENCODER + DIAG_HEAD)
                apply_update(net, g, head_lr, SEX_HEAD)

        tr_diag, tr_sex = head_losses(net, train_set)
        va_diag, va_sex = head_losses(net, val_set)
        if not all(math.isfinite(v) for v in (tr_diag, tr_sex, va_diag, va_sex)) or not all(
            np.all(np.isfinite(p)) for p in net.params().values()
        ):
            raise TrainingError(f"non-finite loss or parameters at epoch {epoch}")
        log.epochs.append(
            {"epoch": epoch, "train_diag": tr_diag, "train_sex": tr_sex, "val_diag": va_diag, "val_sex": va_sex}
        )
        log.stopping_epoch = epoch
        if va_diag < best_loss - config.min_delta:
            best_loss, best_net, since_best = va_diag, net.copy(), 0
            log.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience:
                log.stopped_early = True
                break

    log.snapshot_id = best_net.snapshot_id()
    return best_net, log


@dataclass(frozen=True)
class SyntheticConfig:
    feature_dim: int = 8
    n_samples: int = 1000
    class_signal: float = 2.0
    sex_signal: float = 2.0
    rho: float = 0.0
    noise_scale: float = 1.0
    seed: int = 0
    female_fraction: float = 0.5

    def __post_init__(self):
        if self.feature_dim < 2 or self.n_samples < 1:
            raise ValidationError("feature_dim must be >= 2 and n_samples >= 1")
        if not -1.0 <= self.rho <= 1.0:
            raise ValidationError(f"rho must lie in [-1, 1], got {self.rho}")
        if not self.noise_scale > 0:
            raise ValidationError("noise_scale must be > 0")
        if not 0.0 <= self.female_fraction <= 1.0:
            raise ValidationError("female_fraction must lie in [0, 1]")


def sex_probabilities(rho: float, female_fraction: float) -> tuple[float, float]:
    """P(female | benign), P(female | malignant) giving corr(sex, label) = rho.

    With balanced labels and P(female) = f the correlation is
    ``(p1 - p0) / 2 / sqrt(f (1 - f))``; the difference is clipped so both
    probabilities stay valid.
    """
    f = female_fraction
    if f in (0.0, 1.0):
        return f, f
    half_gap = rho * math.sqrt(f * (1.0 - f))
    half_gap = max(-min(f, 1 - f), min(min(f, 1 - f), half_gap))
    return f - half_gap, f + half_gap


def generate_synthetic(config: SyntheticConfig, id_prefix: str = "syn") -> Examples:
    """Balanced diagnosis labels, correlated sex, features with two signal directions.

    Sex is assigned by quota: each label class gets the rounded expected
    number of females.  The diagnosis shifts features along the first axis and sex along the
    second; all axes get isotropic Gaussian noise.
    """
    rng = make_rng(config.seed, 21)
    n = config.n_samples
    y = np.zeros(n)
    y[: n // 2] = 1.0
    y = rng.permutation(y)
    p0, p1 = sex_probabilities(config.rho, config.female_fraction)
    # exact female quota inside each label class, randomly placed
    a = np.zeros(n)
    for label, p in ((0.0, p0), (1.0, p1)):
        idx = np.flatnonzero(y == label)
        k = int(math.floor(p * len(idx) + 0.5))
        a[rng.permutation(idx)[:k]] = 1.0
    X = rng.normal(0.0, config.noise_scale, (n, config.feature_dim))
    X[:, 0] += config.class_signal * (y - 0.5)
    X[:, 1] += config.sex_signal * (a - 0.5)
    ids = tuple(f"{id_prefix}{config.seed}_{i:06d}" for i in range(n))
    return Examples(X, y, a, ids)


def fit_probe(features: np.ndarray, target: np.ndarray, ridge: float = 1e-3, iters: int = 50) -> np.ndarray:
    """Ridge logistic regression by Newton's method; returns weights with bias last."""
    Z = np.hstack([features, np.ones((features.shape[0], 1))])
    w = np.zeros(Z.shape[1])
    reg = ridge * np.eye(Z.shape[1])
    reg[-1, -1] = 0.0
    for _ in range(iters):
        p = sigmoid(Z @ w)
        g = Z.T @ (p - target) / len(target) + reg @ w
        H = (Z * (p * (1 - p))[:, None]).T @ Z / len(target) + reg + 1e-9 * np.eye(Z.shape[1])
        step = np.linalg.solve(H, g)
        w -= step
        if np.max(np.abs(step)) < 1e-10:
            break
    return w


def probe_scores(w: np.ndarray, features: np.ndarray) -> np.ndarray:
    return sigmoid(features @ w[:-1] + w[-1])


def sex_probe_auc(net: Network, data: Examples, seed: int = 0) -> float:
    """AUC of a logistic sex probe on frozen encoder codes (fit on one half, scored on the other)."""
    z, _, _ = forward(net, data.features)
    mu, sd = z.mean(axis=0), z.std(axis=0)
    z = (z - mu) / np.where(sd > 0, sd, 1.0)
    order = make_rng(seed, 31).permutation(len(data))
    half = len(order) // 2
    fit_idx, score_idx = order[:half], order[half:]
    w = fit_probe(z[fit_idx], data.a[fit_idx])
    return auc_score(probe_scores(w, z[score_idx]), data.a[score_idx])


def predict(net: Network, data: Examples) -> np.ndarray:
    return forward(net, data.features)[1]


def with_strategy(config: StrategyConfig, strategy: Strategy | str, **changes) -> StrategyConfig:
    return replace(config, strategy=Strategy(strategy), **changes)
