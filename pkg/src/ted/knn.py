"""Exact cosine-distance kNN over stored embeddings, with Gaussian-kernel weighted predictions.

The neighbors returned for a query double as its evidence: they are the
training cases whose labels and explanations produced the prediction.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .dataset import CATEGORICAL, SpaceDescriptor, payload_matrix

SIGMA_FLOOR = 1e-6


class Neighbor(NamedTuple):
    id: str
    distance: float
    weight: float = float("nan")
    row: int = -1


@dataclass(frozen=True)
class KnnConfig:
    """``sigma`` is a positive bandwidth or ``"adaptive"`` (mean distance of the k neighbors)."""

    k: int = 10
    sigma: float | str = "adaptive"

    def __post_init__(self):
        if int(self.k) < 1:
            raise ValueError("k must be >= 1")
        object.__setattr__(self, "k", int(self.k))
        if isinstance(self.sigma, str):
            if self.sigma != "adaptive":
                raise ValueError(f"sigma must be a positive number or 'adaptive', got {self.sigma!r}")
        else:
            if not float(self.sigma) > 0:
                raise ValueError("fixed sigma must be > 0")
            object.__setattr__(self, "sigma", float(self.sigma))

    @classmethod
    def parse_sigma(cls, text: str) -> float | str:
        return "adaptive" if text == "adaptive" else float(text)


@dataclass(frozen=True, eq=False)
class EmbeddingIndex:
    embeddings: np.ndarray  # (n, d), unit rows
    labels: np.ndarray
    explanations: np.ndarray
    ids: np.ndarray
    y_space: SpaceDescriptor
    e_space: SpaceDescriptor

    def __len__(self):
        return self.embeddings.shape[0]

    def to_dict(self) -> dict:
        return {
            "embeddings": self.embeddings.tolist(),
            "labels": self.labels.tolist(),
            "explanations": self.explanations.tolist(),
            "ids": self.ids.tolist(),
            "label_space": self.y_space.to_dict(),
            "explanation_space": self.e_space.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "EmbeddingIndex":
        emb = np.asarray(d["embeddings"], dtype=np.float64)
        return _freeze(
            cls(
                emb,
                _payload(d["labels"], SpaceDescriptor.from_dict(d["label_space"])),
                _payload(d["explanations"], SpaceDescriptor.from_dict(d["explanation_space"])),
                np.asarray(d["ids"]).astype(str),
                SpaceDescriptor.from_dict(d["label_space"]),
                SpaceDescriptor.from_dict(d["explanation_space"]),
            )
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _payload(values, space):
    if space.kind == CATEGORICAL:
        return np.asarray(values, dtype=np.int64).reshape(-1)
    arr = np.asarray(values, dtype=np.float64)
    return arr.reshape(-1) if space.kind != "continuous-vector" else arr.reshape(len(arr), -1)


def _freeze(idx):
    for arr in (idx.embeddings, idx.labels, idx.explanations, idx.ids):
        arr.flags.writeable = False
    return idx


def _default_space(values):
    arr = np.asarray(values)
    if arr.dtype.kind in "iu" and arr.ndim == 1:
        return SpaceDescriptor.categorical(max(int(arr.max()) + 1, 2))
    if arr.ndim == 1:
        return SpaceDescriptor.scalar()
    return SpaceDescriptor.vector(arr.shape[1])


def build_index(embeddings, labels, explanations, ids=None, y_space=None, e_space=None) -> EmbeddingIndex:
    """Normalise and store training embeddings with their label/explanation payloads.

    Integer 1-D payloads are treated as categorical unless a space is given.
    """
    emb = np.array(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise ValueError("need a non-empty (n, d) embedding matrix")
    n = emb.shape[0]
    ids = np.arange(n).astype(str) if ids is None else np.asarray(ids).astype(str)
    if len(labels) != n or len(explanations) != n or len(ids) != n:
        raise ValueError("embeddings, labels, explanations and ids must have the same length")
    norms = np.linalg.norm(emb, axis=1)
    zero = np.flatnonzero(~(norms > 0))
    if zero.size:
        raise ValueError(f"zero-norm embedding for row id {ids[zero[0]]!r}")
    y_space = y_space or _default_space(labels)
    e_space = e_space or _default_space(explanations)
    return _freeze(
        EmbeddingIndex(
            emb / norms[:, None],
            _payload(labels, y_space),
            _payload(explanations, e_space),
            ids,
            y_space,
            e_space,
        )
    )


def _unit(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(~(norm > 0)):
        raise ValueError("zero query vector")
    return q / norm


def _clamp_k(idx, k):
    if k > len(idx):
        warnings.warn(f"k={k} exceeds index size {len(idx)}; using {len(idx)}", stacklevel=3)
        return len(idx)
    return k


def cosine_distances(idx: EmbeddingIndex, Q) -> np.ndarray:
    """``1 - cos`` between each query row and every stored row, shape ``(m, n)``."""
    # one matrix-vector product per query keeps results independent of batch composition
    return np.stack([1.0 - idx.embeddings @ q for q in _unit(np.atleast_2d(Q))])


TIE_DECIMALS = 12


def _select(dist_row, k):
    # stable sort on rounded distances: rows whose true distances are equal can differ by a few ulps
    # after normalisation, and rounding lets row position decide those ties
    order = np.argsort(np.round(dist_row, TIE_DECIMALS), kind="stable")
    return order[:k]


def search(idx: EmbeddingIndex, Q, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Batch exact search: ``(rows, distances)`` each of shape ``(m, min(k, n))``."""
    k = _clamp_k(idx, k)
    D = cosine_distances(idx, Q)
    rows = np.stack([_select(d, k) for d in D])
    return rows, np.take_along_axis(D, rows, axis=1)


def query_neighbors(idx: EmbeddingIndex, q, k: int) -> list[Neighbor]:
    """Exact k nearest rows by cosine distance, nearest first."""
    rows, dists = search(idx, np.asarray(q).reshape(1, -1), k)
    return [Neighbor(str(idx.ids[r]), float(d), row=int(r)) for r, d in zip(rows[0], dists[0])]


def kernel_weights(distances, sigma: float | str = "adaptive") -> tuple[np.ndarray, bool]:
    """Normalised Gaussian weights ``exp(-d^2 / 2 sigma^2)``; second value flags the uniform fallback."""
    d = np.asarray(distances, dtype=np.float64)
    s = max(float(d.mean()), SIGMA_FLOOR) if sigma == "adaptive" else float(sigma)
    w = np.exp(-(d**2) / (2.0 * s * s))
    total = w.sum()
    if not total > 0:
        return np.full(d.shape, 1.0 / d.size), True
    return w / total, False


def _combine(values, weights, space):
    if space.kind == CATEGORICAL:
        votes = np.bincount(values, weights=weights, minlength=space.size)
        return int(np.argmax(votes))  # first maximum = smallest class
    combined = weights @ payload_matrix(values)
    return float(combined[0]) if space.kind != "continuous-vector" else combined


@dataclass(frozen=True)
class Prediction:
    y: object
    e: object
    evidence: tuple[Neighbor, ...]
    uniform_fallback: bool = False


def predict(idx: EmbeddingIndex, q, cfg: KnnConfig = KnnConfig()) -> Prediction:
    """Kernel-weighted label and explanation for one query, with its neighbors as evidence."""
    neighbors = query_neighbors(idx, q, cfg.k)
    rows = np.array([nb.row for nb in neighbors])
    weights, fallback = kernel_weights([nb.distance for nb in neighbors], cfg.sigma)
    if fallback:
        warnings.warn("kernel weights underflowed; using uniform weights", RuntimeWarning, stacklevel=2)
    evidence = tuple(nb._replace(weight=float(w)) for nb, w in zip(neighbors, weights))
    return Prediction(
        _combine(idx.labels[rows], weights, idx.y_space),
        _combine(idx.explanations[rows], weights, idx.e_space),
        evidence,
        fallback,
    )


def predict_batch(idx: EmbeddingIndex, Q, cfg: KnnConfig = KnnConfig()) -> tuple[np.ndarray, np.ndarray, int]:
    """Predictions for many queries at once: ``(Y_hat, E_hat, n_fallbacks)``.

    Row-for-row identical to calling :func:`predict` on each query.
    """
    rows, dists = search(idx, Q, cfg.k)
    ys, es, fallbacks = [], [], 0
    for r, d in zip(rows, dists):
        w, fb = kernel_weights(d, cfg.sigma)
        fallbacks += fb
        ys.append(_combine(idx.labels[r], w, idx.y_space))
        es.append(_combine(idx.explanations[r], w, idx.e_space))
    return np.array(ys), np.array(es), fallbacks
