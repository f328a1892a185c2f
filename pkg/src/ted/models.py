"""Dense feed-forward networks trained by minibatch SGD, plus sparse linear baselines.

A :class:`Network` is a shared trunk (input -> hidden layers) followed by one or
more output heads that all read the last hidden layer. That last hidden layer
is the *embedding*: its post-activation values are what the kNN predictors
index.
"""

from __future__ import annotations

import copy
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

SOFTMAX = "softmax"
LINEAR = "linear"
HEAD_KINDS = (SOFTMAX, LINEAR)
ACTIVATIONS = ("relu", "identity")


class DivergenceError(FloatingPointError):
    """Raised when a loss or parameter becomes non-finite during training."""


@dataclass(frozen=True)
class Head:
    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"head kind must be one of {HEAD_KINDS}, got {self.kind!r}")
        if self.size < 1:
            raise ValueError("head width must be >= 1")


class Network:
    """Parameters and topology. ``layers`` lists ``(W, b)`` for trunk layers then heads."""

    def __init__(self, sizes, activations, heads, weights, biases):
        self.sizes = tuple(int(s) for s in sizes)
        self.activations = tuple(activations)
        self.heads = tuple(heads)
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self._validate()

    def _validate(self):
        if len(self.sizes) < 1 or any(s < 1 for s in self.sizes):
            raise ValueError(f"layer widths must be >= 1, got {self.sizes}")
        if len(self.activations) != self.n_trunk:
            raise ValueError("one activation per hidden layer required")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if not self.heads:
            raise ValueError("network needs at least one head")
        shapes = [(self.sizes[i], self.sizes[i + 1]) for i in range(self.n_trunk)]
        shapes += [(self.embedding_size, h.size) for h in self.heads]
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError("parameter count does not match topology")
        for W, b, shape in zip(self.weights, self.biases, shapes):
            if W.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"parameter shape {W.shape}/{b.shape} does not match layer {shape}")

    @property
    def n_trunk(self) -> int:
        return len(self.sizes) - 1

    @property
    def input_size(self) -> int:
        return self.sizes[0]

    @property
    def embedding_layer(self) -> int:
        """Index into ``sizes`` of the last hidden layer (0 means the input itself)."""
        return len(self.sizes) - 1

    @property
    def embedding_size(self) -> int:
        return self.sizes[-1]

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.weights, self.biases))

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "activations": list(self.activations),
            "heads": [{"kind": h.kind, "size": h.size} for h in self.heads],
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d) -> "Network":
        heads = [Head(h["kind"], int(h["size"])) for h in d["heads"]]
        weights = [np.asarray(W, dtype=np.float64).reshape(len(W), -1) for W in d["weights"]]
        return cls(d["sizes"], d["activations"], heads, weights, d["biases"])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def __repr__(self):
        heads = ", ".join(f"{h.kind}({h.size})" for h in self.heads)
        return f"Network(sizes={self.sizes}, activations={self.activations}, heads=[{heads}])"


def init_network(layer_sizes, heads, seed=0, activation="relu") -> Network:
    """Glorot-uniform weights, zero biases.

    ``layer_sizes`` is ``(input, hidden..., head outputs...)``: the trailing
    ``len(heads)`` entries are the head widths. ``heads`` gives each head's kind
    (``"softmax"`` or ``"linear"``). ``activation`` is one name for every
    hidden layer or a sequence with one entry per hidden layer.

    >>> net = init_network((19, 200, 9), ["softmax"], seed=1)
    >>> net.sizes, net.heads[0].size
    ((19, 200), 9)
    """
    layer_sizes = [int(s) for s in layer_sizes]
    heads = [heads] if isinstance(heads, str) else list(heads)
    if len(layer_sizes) < len(heads) + 1:
        raise ValueError("layer_sizes must hold the input width plus one width per head")
    if any(s < 1 for s in layer_sizes):
        raise ValueError(f"zero-width layer in {layer_sizes}")
    trunk = layer_sizes[: len(layer_sizes) - len(heads)]
    heads = [Head(k, s) if isinstance(k, str) else k for k, s in zip(heads, layer_sizes[len(trunk) :])]
    n_hidden = len(trunk) - 1
    activations = [activation] * n_hidden if isinstance(activation, str) else list(activation)

    rng = np.random.default_rng(seed)
    shapes = [(trunk[i], trunk[i + 1]) for i in range(n_hidden)] + [(trunk[-1], h.size) for h in heads]
    weights, biases = [], []
    for fan_in, fan_out in shapes:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(trunk, activations, heads, weights, biases)


# ------------------------------------------------------------------ forward pass


@dataclass
class Forward:
    outputs: list[np.ndarray]  # probabilities for softmax heads, values for linear heads
    embedding: np.ndarray
    logits: list[np.ndarray]
    trunk_inputs: list[np.ndarray]  # input to each trunk layer
    trunk_pre: list[np.ndarray]  # pre-activation of each trunk layer


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _as_batch(net, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = X.reshape(1, -1) if single else X
    if X.ndim != 2 or X.shape[1] != net.input_size:
        raise ValueError(f"expected inputs of width {net.input_size}, got shape {np.shape(X)}")
    return X, single


def trunk_forward(net: Network, X: np.ndarray):
    inputs, pres = [], []
    h = X
    for W, b, act in zip(net.weights, net.biases, net.activations):
        inputs.append(h)
        z = h @ W + b
        pres.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
    return h, inputs, pres


def forward(net: Network, X) -> Forward:
    """Run a batch (or a single vector) through every head."""
    X, single = _as_batch(net, X)
    emb, inputs, pres = trunk_forward(net, X)
    logits, outputs = [], []
    for head, W, b in zip(net.heads, net.weights[net.n_trunk :], net.biases[net.n_trunk :]):
        z = emb @ W + b
        logits.append(z)
        outputs.append(softmax(z) if head.kind == SOFTMAX else z)
    if single:
        outputs = [o[0] for o in outputs]
        emb = emb[0]
    return Forward(outputs, emb, logits, inputs, pres)


def embed(net: Network, X) -> np.ndarray:
    X, single = _as_batch(net, X)
    emb = trunk_forward(net, X)[0]
    return emb[0] if single else emb


def predict_classes(net: Network, X, head: int = 0) -> np.ndarray:
    return np.argmax(forward(net, X).logits[head], axis=-1)


# -------------------------------------------------------------- loss / gradients


def trunk_backward(net: Network, inputs, pres, d_emb) -> tuple[list, list]:
    """Backpropagate a gradient on the embedding through the trunk."""
    dWs, dbs = [None] * net.n_trunk, [None] * net.n_trunk
    g = d_emb
    for i in reversed(range(net.n_trunk)):
        if net.activations[i] == "relu":
            g = g * (pres[i] > 0)  # subgradient 0 at the kink
        dWs[i] = inputs[i].T @ g
        dbs[i] = g.sum(axis=0)
        if i > 0:
            g = g @ net.weights[i].T
    return dWs, dbs


def _head_loss(head: Head, logits, target):
    """Per-batch mean loss and d(loss)/d(logits) for one head."""
    n = logits.shape[0]
    if head.kind == SOFTMAX:
        target = np.asarray(target).astype(np.int64).reshape(-1)
        if target.shape[0] != n or np.any((target < 0) | (target >= head.size)):
            raise ValueError("softmax targets must be class indices within the head width")
        logp = log_softmax(logits)
        loss = -logp[np.arange(n), target].mean()
        grad = np.exp(logp)
        grad[np.arange(n), target] -= 1.0
        return loss, grad / n
    target = np.asarray(target, dtype=np.float64).reshape(n, -1)
    if target.shape[1] != head.size:
        raise ValueError(f"linear head of width {head.size} got targets of width {target.shape[1]}")
    diff = logits - target
    return np.mean(diff**2), 2.0 * diff / diff.size


def _head_weights(net, head_weights):
    if head_weights is None:
        return np.ones(len(net.heads))
    hw = np.asarray(head_weights, dtype=np.float64).reshape(-1)
    if hw.shape[0] != len(net.heads) or np.any(hw < 0):
        raise ValueError("need one non-negative weight per head")
    return hw


def loss_and_gradients(net: Network, X, targets, head_weights=None):
    """Weighted sum of per-head mean losses and its exact parameter gradients.

    Softmax heads use cross-entropy (natural log); linear heads use squared
    error averaged over batch and output dimensions. ``targets`` holds one
    array per head. Gradients come back as ``(dWs, dbs)`` aligned with
    ``net.weights``/``net.biases``.
    """
    X, _ = _as_batch(net, X)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if len(targets) != len(net.heads):
        raise ValueError(f"{len(net.heads)} heads but {len(targets)} target arrays")
    hw = _head_weights(net, head_weights)
    emb, inputs, pres = trunk_forward(net, X)
    total = 0.0
    d_emb = np.zeros_like(emb)
    head_dW, head_db = [], []
    for j, (head, target) in enumerate(zip(net.heads, targets)):
        W, b = net.weights[net.n_trunk + j], net.biases[net.n_trunk + j]
        loss, g = _head_loss(head, emb @ W + b, target)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss on head {j}")
        g = hw[j] * g
        total += hw[j] * loss
        head_dW.append(emb.T @ g)
        head_db.append(g.sum(axis=0))
        d_emb += g @ W.T
    dWs, dbs = trunk_backward(net, inputs, pres, d_emb)
    return total, (dWs + head_dW, dbs + head_db)


# --------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.01
    layer_learning_rates: dict | None = None  # layer index (trunk first, then heads) -> rate
    head_weights: tuple | None = None
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.layer_learning_rates:
            rates = {int(k): float(v) for k, v in self.layer_learning_rates.items()}
            if any(not v > 0 for v in rates.values()):
                raise ValueError("per-layer learning rates must be > 0")
            object.__setattr__(self, "layer_learning_rates", rates)
        if self.head_weights is not None:
            hw = tuple(float(w) for w in self.head_weights)
            if any(w < 0 for w in hw):
                raise ValueError("head weights must be >= 0")
            object.__setattr__(self, "head_weights", hw)

    def rate_for(self, layer: int) -> float:
        if self.layer_learning_rates and layer in self.layer_learning_rates:
            return self.layer_learning_rates[layer]
        return self.learning_rate

    def to_dict(self) -> dict:
        d = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "shuffle": self.shuffle,
        }
        if self.layer_learning_rates:
            d["layer_learning_rates"] = {str(k): v for k, v in sorted(self.layer_learning_rates.items())}
        if self.head_weights is not None:
            d["head_weights"] = list(self.head_weights)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    network: Network
    losses: list[float] = field(default_factory=list)  # mean minibatch loss per epoch
    diagnostics: dict = field(default_factory=dict)


def minibatches(n: int, config: TrainConfig, rng: np.random.Generator):
    order = rng.permutation(n) if config.shuffle else np.arange(n)
    for start in range(0, n, config.batch_size):
        yield order[start : start + config.batch_size]


def sgd_step(net: Network, grads, config: TrainConfig, layers=None):
    dWs, dbs = grads
    for i in range(len(net.weights)) if layers is None else layers:
        lr = config.rate_for(i)
        net.weights[i] -= lr * dWs[i]
        net.biases[i] -= lr * dbs[i]


def check_finite(net: Network, where: str):
    for i, (W, b) in enumerate(net.layers):
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise DivergenceError(f"non-finite parameters in layer {i} {where}")


def train_sgd(net: Network, X, targets, config: TrainConfig) -> TrainResult:
    """Plain minibatch SGD on a copy of ``net``.

    Fixed seed gives a fixed shuffle order and batch partition, hence
    bitwise-identical runs.
    """
    net = net.copy()
    X, _ = _as_batch(net, X)
    targets = [np.asarray(t) for t in targets]
    rng = np.random.default_rng(config.seed)
    losses = []
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for idx in minibatches(X.shape[0], config, rng):
            try:
                loss, grads = loss_and_gradients(net, X[idx], [t[idx] for t in targets], config.head_weights)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from None
            sgd_step(net, grads, config)
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / count)
        if not math.isfinite(losses[-1]):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        check_finite(net, f"after epoch {epoch}")
    return TrainResult(net, losses)


# ---------------------------------------------------------------- gradient check


def finite_difference_check(
    net: Network,
    loss_fn: Callable[[Network], float],
    grads,
    epsilon: float = 1e-5,
    n_checks: int | None = 200,
    seed: int = 0,
) -> float:
    """Max relative error between ``grads`` and central differences of ``loss_fn``.

    Checks a seeded random subset of ``n_checks`` scalar parameters (all of
    them when ``None``). Error per entry is ``|fd - an| / max(1, |fd|, |an|)``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    dWs, dbs = grads
    params, analytic = [], []
    for i in range(len(net.weights)):
        params += [net.weights[i], net.biases[i]]
        analytic += [dWs[i], dbs[i]]
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if n_checks is None or n_checks >= total else rng.choice(total, n_checks, replace=False)
    work = net.copy()
    wparams = []
    for i in range(len(work.weights)):
        wparams += [work.weights[i], work.biases[i]]
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[k])
        p = wparams[k].reshape(-1)
        orig = p[j]
        p[j] = orig + epsilon
        up = loss_fn(work)
        p[j] = orig - epsilon
        down = loss_fn(work)
        p[j] = orig
        fd = (up - down) / (2 * epsilon)
        an = float(analytic[k].reshape(-1)[j])
        worst = max(worst, abs(fd - an) / max(1.0, abs(fd), abs(an)))
    return worst


def gradient_check(net: Network, X, targets, head_weights=None, epsilon=1e-5, n_checks=200, seed=0) -> float:
    """Compare :func:`loss_and_gradients` against central finite differences."""
    _, grads = loss_and_gradients(net, X, targets, head_weights)
    return finite_difference_check(
        net, lambda n: loss_and_gradients(n, X, targets, head_weights)[0], grads, epsilon, n_checks, seed
    )


# ----------------------------------------------------------------- linear models


@dataclass(eq=False)
class LinearModel:
    coefficients: np.ndarray  # (features, outputs)
    intercepts: np.ndarray  # (outputs,)
    penalty: str  # "lasso" or "l21"
    alpha: float
    n_iter: int = 0
    converged: bool = True
    objective: float = float("nan")
    single_output: bool = False

    def predict(self, X) -> np.ndarray:
        out = np.asarray(X, dtype=np.float64) @ self.coefficients + self.intercepts
        return out[:, 0] if self.single_output else out

    def active_rows(self) -> np.ndarray:
        """Feature indices with any nonzero coefficient."""
        return np.flatnonzero(np.any(self.coefficients != 0, axis=1))

    def to_dict(self) -> dict:
        return {
            "coefficients": self.coefficients.tolist(),
            "intercepts": self.intercepts.tolist(),
            "penalty": self.penalty,
            "alpha": self.alpha,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "objective": self.objective,
            "single_output": self.single_output,
        }

    @classmethod
    def from_dict(cls, d) -> "LinearModel":
        d = dict(d)
        coef = np.asarray(d.pop("coefficients"), dtype=np.float64)
        return cls(coef.reshape(len(coef), -1), np.asarray(d.pop("intercepts"), dtype=np.float64), **d)


def _prox_l1(W, t):
    return np.sign(W) * np.maximum(np.abs(W) - t, 0.0)


def _prox_l21(W, t):
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    scale = np.maximum(1.0 - t / np.maximum(norms, 1e-300), 0.0)
    return W * scale


def _penalty_value(W, penalty):
    return np.abs(W).sum() if penalty == "lasso" else np.linalg.norm(W, axis=1).sum()


def _ista(X, Y, alpha, penalty, iterations, tolerance):
    """Minimise 1/(2n)·||Yc - Xc W||_F^2 + alpha·penalty(W) with backtracking ISTA.

    Intercepts are unpenalised and recovered from the column means.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = X.shape[0]
    if X.ndim != 2 or Y.shape[0] != n or n == 0:
        raise ValueError("X must be (n, p) and Y must have n rows")
    x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - x_mean, Y - y_mean
    prox = _prox_l1 if penalty == "lasso" else _prox_l21

    def smooth(W):
        r = Yc - Xc @ W
        return 0.5 * np.sum(r * r) / n

    def grad(W):
        return -(Xc.T @ (Yc - Xc @ W)) / n

    W = np.zeros((X.shape[1], Y.shape[1]))
    f = smooth(W)
    obj = f + alpha * _penalty_value(W, penalty)
    obj0 = obj
    L = 1.0
    converged = False
    it = 0
    for it in range(1, iterations + 1):
        g = grad(W)
        while True:
            W_new = prox(W - g / L, alpha / L)
            D = W_new - W
            f_new = smooth(W_new)
            if f_new <= f + np.sum(g * D) + 0.5 * L * np.sum(D * D) + 1e-15 * max(abs(f), 1.0):
                break
            L *= 2.0
        obj_new = f_new + alpha * _penalty_value(W_new, penalty)
        change = abs(obj - obj_new) / max(abs(obj), 1e-12 * max(obj0, 1e-300))
        W, f, obj = W_new, f_new, obj_new
        L = max(L * 0.9, 1e-12)
        if change < tolerance:
            converged = True
            break
    if not converged:
        warnings.warn(f"{penalty} solver hit the {iterations}-iteration cap without converging", stacklevel=3)
    return W, y_mean - x_mean @ W, it, converged, obj


def fit_lasso(X, y, alpha, iterations=20000, tolerance=1e-12) -> LinearModel:
    """l1-penalised least squares, one output (or independent l1 per column of a matrix y)."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    Y = y.reshape(len(y), -1)
    W, b, it, ok, obj = _ista(X, Y, alpha, "lasso", iterations, tolerance)
    return LinearModel(W, b, "lasso", float(alpha), it, ok, float(obj), single)


def fit_multitask_l21(X, Y, alpha, iterations=20000, tolerance=1e-12) -> LinearModel:
    """Multi-output least squares with the l2,1 (row-group) penalty on coefficients.

    Whole feature rows go to zero together.
    """
    Y = np.asarray(Y, dtype=np.float64)
    single = Y.ndim == 1
    W, b, it, ok, obj = _ista(X, Y.reshape(len(Y), -1), alpha, "l21", iterations, tolerance)
    return LinearModel(W, b, "l21", float(alpha), it, ok, float(obj), single)


def l21_alpha_max(X, Y) -> float:
    """Smallest alpha at which every coefficient row of the l2,1 fit is zero."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(X), -1)
    Xc, Yc = X - X.mean(axis=0), Y - Y.mean(axis=0)
    return float(np.linalg.norm(Xc.T @ Yc / len(X), axis=1).max())
