"""Pairwise cosine embedding losses driven by label and explanation similarity.

For a pair ``(a, b)`` with embeddings ``f_a, f_b`` and ``s = cos(f_a, f_b)``:

* neighbors contribute ``1 - s``
* non-neighbors contribute ``max(s - margin, 0)``
* pairs in the buffer zone between the two thresholds contribute nothing

The label term uses thresholds ``c1 <= c2`` and margin ``m1``; the
explanation term uses ``c3 <= c4`` and ``m2``; the joint objective is
``loss_y + w * loss_e``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .dataset import TripleDataset, payload_matrix
from .models import (
    DivergenceError,
    Network,
    TrainConfig,
    TrainResult,
    check_finite,
    finite_difference_check,
    minibatches,
    sgd_step,
    trunk_backward,
    trunk_forward,
)

COS_EPS = 1e-12
RULES = ("continuous", "categorical")
OBJECTIVES = ("y", "e", "ye")


class YStatus(enum.IntEnum):
    NEIGHBOR = 0
    NON_NEIGHBOR = 1
    BUFFER = 2


class EStatus(enum.IntEnum):
    NEIGHBOR = 0
    NON_NEIGHBOR = 1
    BUFFER = 2
    EXCLUDED = 3


class PairStatus(NamedTuple):
    y: YStatus
    e: EStatus


class PairLoss(NamedTuple):
    loss_y: float
    loss_e: float
    combined: float


@dataclass(frozen=True)
class PairLossConfig:
    """Thresholds, margins and weighting for the pair losses.

    ``objective`` picks what :func:`train_embedding` minimises: the label
    term alone (``"y"``), the explanation term alone (``"e"``) or the
    weighted sum (``"ye"``).
    """

    c1: float = 0.0
    c2: float = 0.0
    c3: float = 0.0
    c4: float = 0.0
    m1: float = 0.25
    m2: float = 0.25
    w: float = 1.0
    neighbor_rule_y: str = "continuous"
    neighbor_rule_e: str = "continuous"
    objective: str = "ye"
    pair_count: int = 100_000
    pair_seed: int = 0
    resample_zero_loss: bool = True
    unique_pairs: bool = False

    def __post_init__(self):
        if self.c1 > self.c2:
            raise ValueError(f"need c1 <= c2, got {self.c1} > {self.c2}")
        if self.c3 > self.c4:
            raise ValueError(f"need c3 <= c4, got {self.c3} > {self.c4}")
        for name in ("m1", "m2"):
            m = getattr(self, name)
            if not 0.0 <= m <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {m}")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"w must lie in [0, 1], got {self.w}")
        for name in ("neighbor_rule_y", "neighbor_rule_e"):
            if getattr(self, name) not in RULES:
                raise ValueError(f"{name} must be one of {RULES}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.pair_count < 1:
            raise ValueError("pair_count must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "PairLossConfig":
        return cls(**d)

    def with_(self, **changes) -> "PairLossConfig":
        d = self.to_dict()
        d.update(changes)
        return PairLossConfig(**d)

    @property
    def uses_y(self) -> bool:
        return self.objective in ("y", "ye")

    @property
    def uses_e(self) -> bool:
        return self.objective == "e" or (self.objective == "ye" and self.w > 0)

    @property
    def e_weight(self) -> float:
        return 1.0 if self.objective == "e" else self.w


AADB = PairLossConfig(c1=0.1, c2=0.3, c3=0.2, c4=0.2, m1=0.25, m2=0.25, w=0.1)
OLFACTORY = PairLossConfig(c1=10, c2=20, c3=0.0272, c4=0.0272, m1=0.25, m2=0.25, w=1.0)
MELANOMA = PairLossConfig(m1=0.75, m2=0.75, neighbor_rule_y="categorical", neighbor_rule_e="categorical")
PRESETS = {"aadb": AADB, "olfactory": OLFACTORY, "melanoma": MELANOMA}


# ------------------------------------------------------------------------ status


def _threshold_status(dist, lo, hi):
    return np.where(dist <= lo, 0, np.where(dist > hi, 1, 2))


def pair_statuses(Y, E, a, b, cfg: PairLossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised status codes (YStatus, EStatus values) for index pairs ``(a[i], b[i])``."""
    Y = np.asarray(Y)
    E = np.asarray(E)
    if cfg.neighbor_rule_y == "categorical":
        ys = np.where(Y[a] == Y[b], int(YStatus.NEIGHBOR), int(YStatus.NON_NEIGHBOR))
    else:
        Ym = payload_matrix(Y)
        ys = _threshold_status(np.abs(Ym[a] - Ym[b]).sum(axis=1), cfg.c1, cfg.c2)
    if cfg.neighbor_rule_e == "categorical":
        same_e = E[a] == E[b]
        same_y = np.all(payload_matrix(Y)[a] == payload_matrix(Y)[b], axis=1)
        es = np.where(
            same_e, int(EStatus.NEIGHBOR), np.where(same_y, int(EStatus.EXCLUDED), int(EStatus.NON_NEIGHBOR))
        )
    else:
        Em = payload_matrix(E)
        es = _threshold_status(np.abs(Em[a] - Em[b]).sum(axis=1), cfg.c3, cfg.c4)
    return ys.astype(np.int8), es.astype(np.int8)


def pair_status(y_a, y_b, e_a, e_b, cfg: PairLossConfig) -> PairStatus:
    """Neighbor status of one pair under the configured rules.

    >>> pair_status(0.50, 0.55, 0.0, 0.0, PairLossConfig(c1=0.1, c2=0.3)).y
    <YStatus.NEIGHBOR: 0>
    """
    for value, rule, what in ((y_a, cfg.neighbor_rule_y, "label"), (e_a, cfg.neighbor_rule_e, "explanation")):
        if rule == "categorical" and np.ndim(value) != 0:
            raise ValueError(f"categorical {what} rule needs scalar class values")
    Y = np.array([y_a, y_b])
    E = np.array([e_a, e_b])
    if Y.shape[1:] != np.shape(y_a) or E.shape[1:] != np.shape(e_a):
        raise ValueError("pair members have mismatched shapes")
    ys, es = pair_statuses(Y, E, np.array([0]), np.array([1]), cfg)
    return PairStatus(YStatus(int(ys[0])), EStatus(int(es[0])))


# -------------------------------------------------------------------------- loss


def cosine(f_a, f_b) -> float:
    f_a = np.asarray(f_a, dtype=np.float64)
    f_b = np.asarray(f_b, dtype=np.float64)
    return float(f_a @ f_b / (max(np.linalg.norm(f_a), COS_EPS) * max(np.linalg.norm(f_b), COS_EPS)))


def _term(s, code, margin):
    if code == 0:
        return 1.0 - s
    if code == 1:
        return max(s - margin, 0.0)
    return 0.0


def pair_loss(f_a, f_b, status: PairStatus, cfg: PairLossConfig) -> PairLoss:
    """``(loss_y, loss_e, loss_y + w * loss_e)`` for one pair of embeddings."""
    if np.linalg.norm(f_a) <= COS_EPS or np.linalg.norm(f_b) <= COS_EPS:
        warnings.warn("zero-norm embedding in pair loss; cosine is epsilon-guarded", RuntimeWarning, stacklevel=2)
    s = cosine(f_a, f_b)
    ly = _term(s, int(status.y), cfg.m1)
    le = _term(s, int(status.e), cfg.m2)
    return PairLoss(ly, le, ly + cfg.w * le)


def _terms_and_grad(s, codes, margin):
    """Loss per pair and d(loss)/d(cos) for one term."""
    loss = np.where(codes == 0, 1.0 - s, np.where(codes == 1, np.maximum(s - margin, 0.0), 0.0))
    dloss = np.where(codes == 0, -1.0, np.where((codes == 1) & (s > margin), 1.0, 0.0))
    return loss, dloss


def batch_objective(Fa, Fb, ys, es, cfg: PairLossConfig, with_grad=True):
    """Mean training objective over a batch of embedding pairs.

    Returns ``(loss, dFa, dFb, n_zero_norm)``; gradients are of the mean.
    """
    na_raw = np.linalg.norm(Fa, axis=1)
    nb_raw = np.linalg.norm(Fb, axis=1)
    na = np.maximum(na_raw, COS_EPS)
    nb = np.maximum(nb_raw, COS_EPS)
    dot = np.einsum("ij,ij->i", Fa, Fb)
    s = dot / (na * nb)
    total = np.zeros_like(s)
    dcos = np.zeros_like(s)
    if cfg.uses_y:
        ly, gy = _terms_and_grad(s, ys, cfg.m1)
        total += ly
        dcos += gy
    if cfg.uses_e:
        le, ge = _terms_and_grad(s, es, cfg.m2)
        total += cfg.e_weight * le
        dcos += cfg.e_weight * ge
    n = len(s)
    loss = float(total.mean())
    n_zero = int(np.sum((na_raw <= COS_EPS) | (nb_raw <= COS_EPS)))
    if not with_grad:
        return loss, None, None, n_zero
    coef = (dcos / n)[:, None]
    inv = 1.0 / (na * nb)
    # norm is constant below the guard, so only the dot-product part survives there
    da = Fb * inv[:, None] - np.where(na_raw > COS_EPS, s / na**2, 0.0)[:, None] * Fa
    db = Fa * inv[:, None] - np.where(nb_raw > COS_EPS, s / nb**2, 0.0)[:, None] * Fb
    return loss, coef * da, coef * db, n_zero


# ----------------------------------------------------------------------- pairs


@dataclass(frozen=True, eq=False)
class PairBatch:
    a: np.ndarray
    b: np.ndarray
    y_status: np.ndarray
    e_status: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if not (len(self.a) == len(self.b) == len(self.y_status) == len(self.e_status)):
            raise ValueError("pair arrays differ in length")
        if np.any(self.a == self.b):
            raise ValueError("self-pairs are not allowed")
        for arr in (self.a, self.b, self.y_status, self.e_status):
            arr.flags.writeable = False

    def __len__(self):
        return len(self.a)

    def __iter__(self) -> Iterator[tuple[int, int, PairStatus]]:
        for i in range(len(self)):
            yield int(self.a[i]), int(self.b[i]), PairStatus(YStatus(int(self.y_status[i])), EStatus(int(self.e_status[i])))

    def __eq__(self, other):
        return isinstance(other, PairBatch) and all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in ("a", "b", "y_status", "e_status")
        )

    def counts(self) -> dict:
        return {
            "y": {s.name: int(np.sum(self.y_status == s)) for s in YStatus},
            "e": {s.name: int(np.sum(self.e_status == s)) for s in EStatus},
        }


def _zero_loss(ys, es, cfg):
    y_zero = ys == YStatus.BUFFER
    e_zero = (es == EStatus.BUFFER) | (es == EStatus.EXCLUDED)
    if cfg.objective == "y" or not cfg.uses_e:
        return y_zero
    if cfg.objective == "e":
        return e_zero
    return y_zero & e_zero


def _draw(rng, n, size):
    a = rng.integers(0, n, size=size)
    b = rng.integers(0, n - 1, size=size)
    b = b + (b >= a)  # uniform over indices other than a
    return a, b


def sample_pairs(ds: TripleDataset, count: int | None = None, cfg: PairLossConfig = PairLossConfig(), seed: int | None = None) -> PairBatch:
    """Uniformly random index pairs (no self-pairs) with precomputed statuses.

    Pairs that would carry no loss under ``cfg.objective`` are redrawn, with
    at most ``10 * count`` draws in total; whatever is left after that is
    kept.
    """
    count = cfg.pair_count if count is None else count
    seed = cfg.pair_seed if seed is None else seed
    n = len(ds)
    if n < 2:
        raise ValueError("need at least 2 rows to sample pairs")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    Y, E = ds.labels, ds.explanations
    budget = 10 * count

    if cfg.unique_pairs:
        if count > n * (n - 1) // 2:
            raise ValueError("more unique pairs requested than exist")
        a, b = np.empty(0, np.int64), np.empty(0, np.int64)
        drawn = 0
        while len(a) < count:
            na, nb = _draw(rng, n, count)
            a, b = np.concatenate([a, na]), np.concatenate([b, nb])
            key = np.minimum(a, b) * n + np.maximum(a, b)
            _, first = np.unique(key, return_index=True)
            keep = np.sort(first)[:count]
            a, b = a[keep], b[keep]
            drawn += count
        budget = max(budget - drawn, 0)
    else:
        a, b = _draw(rng, n, count)
        budget -= count
    ys, es = pair_statuses(Y, E, a, b, cfg)

    if cfg.resample_zero_loss:
        bad = np.flatnonzero(_zero_loss(ys, es, cfg))
        while bad.size and budget > 0:
            bad = bad[:budget]
            na, nb = _draw(rng, n, bad.size)
            budget -= bad.size
            a[bad], b[bad] = na, nb
            ys[bad], es[bad] = pair_statuses(Y, E, na, nb, cfg)
            bad = bad[_zero_loss(ys[bad], es[bad], cfg)]
    return PairBatch(a.astype(np.int64), b.astype(np.int64), ys, es, seed)


# -------------------------------------------------------------------- training


def _trunk_layers(net):
    return range(net.n_trunk)


def pair_loss_and_gradients(net: Network, X, a, b, ys, es, cfg: PairLossConfig):
    """Mean pair objective and gradients for every layer (heads get zeros)."""
    Fa, in_a, pre_a = trunk_forward(net, X[a])
    Fb, in_b, pre_b = trunk_forward(net, X[b])
    loss, dFa, dFb, n_zero = batch_objective(Fa, Fb, ys, es, cfg)
    dW_a, db_a = trunk_backward(net, in_a, pre_a, dFa)
    dW_b, db_b = trunk_backward(net, in_b, pre_b, dFb)
    dWs = [wa + wb for wa, wb in zip(dW_a, dW_b)]
    dbs = [ba + bb for ba, bb in zip(db_a, db_b)]
    dWs += [np.zeros_like(W) for W in net.weights[net.n_trunk :]]
    dbs += [np.zeros_like(bias) for bias in net.biases[net.n_trunk :]]
    return loss, (dWs, dbs), n_zero


def train_embedding(net: Network, X, batch: PairBatch, config: TrainConfig, cfg: PairLossConfig) -> TrainResult:
    """SGD on the trunk (everything up to the embedding layer) to minimise the pair objective.

    Gradients flow through both members of every pair. Heads are left as
    they are. Works on a copy of ``net``.
    """
    if net.n_trunk == 0:
        raise ValueError("network has no hidden layer to embed with")
    X = np.asarray(X, dtype=np.float64)
    if len(batch) and (batch.a.max() >= len(X) or batch.b.max() >= len(X)):
        raise ValueError("pair indices exceed dataset size")
    net = net.copy()
    rng = np.random.default_rng(config.seed)
    losses, zero_norm = [], 0
    ys = np.asarray(batch.y_status)
    es = np.asarray(batch.e_status)
    for epoch in range(config.epochs):
        total = 0.0
        for idx in minibatches(len(batch), config, rng):
            loss, grads, nz = pair_loss_and_gradients(net, X, batch.a[idx], batch.b[idx], ys[idx], es[idx], cfg)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite pair loss at epoch {epoch}")
            zero_norm += nz
            sgd_step(net, grads, config, layers=_trunk_layers(net))
            total += loss * len(idx)
        losses.append(total / max(len(batch), 1))
        check_finite(net, f"after pair epoch {epoch}")
    return TrainResult(net, losses, {"zero_norm_pairs": zero_norm})


def mean_pair_objective(net: Network, X, batch: PairBatch, cfg: PairLossConfig) -> float:
    F = trunk_forward(net, np.asarray(X, dtype=np.float64))[0]
    return batch_objective(F[batch.a], F[batch.b], batch.y_status, batch.e_status, cfg, with_grad=False)[0]


def pair_gradient_check(net: Network, X, batch: PairBatch, cfg: PairLossConfig, epsilon=1e-5, n_checks=200, seed=0) -> float:
    """Max relative error of pair-loss gradients against central differences."""
    X = np.asarray(X, dtype=np.float64)
    args = (batch.a, batch.b, batch.y_status, batch.e_status, cfg)
    _, grads, _ = pair_loss_and_gradients(net, X, *args)
    return finite_difference_check(
        net, lambda n: pair_loss_and_gradients(n, X, *args)[0], grads, epsilon, n_checks, seed
    )
