"""Visual codebook (k-means), nearest-word quantisation and word histograms."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .descriptors import DIM, DescriptorSet

CODEBOOK_MAGIC = b"RCB1"
_ASSIGN_CHUNK = 8192


class BovwError(ValueError):
    pass


class TooFewFeatures(BovwError):
    def __init__(self, m: int, w: int):
        self.m, self.w = m, w
        super().__init__(f"{m} features cannot form {w} clusters")


class NonFiniteInput(BovwError):
    pass


class DimensionMismatch(BovwError):
    pass


class CodebookFormatError(BovwError):
    pass


class EmptyHistogramWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CodebookConfig:
    words: int = 200
    max_iterations: int = 100
    rel_tolerance: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.words < 1:
            raise ValueError("words must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.rel_tolerance > 0:
            raise ValueError("rel_tolerance must be > 0")


@dataclass
class Codebook:
    words: np.ndarray  # (K, 64)
    inertia: float = 0.0
    history: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def size(self) -> int:
        return len(self.words)

    def save(self, path) -> None:
        k, d = self.words.shape
        with open(path, "wb") as fh:
            fh.write(CODEBOOK_MAGIC)
            fh.write(struct.pack("<II", k, d))
            fh.write(np.ascontiguousarray(self.words, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != CODEBOOK_MAGIC:
            raise CodebookFormatError("bad magic")
        if len(raw) < 12:
            raise CodebookFormatError("truncated header")
        k, d = struct.unpack_from("<II", raw, 4)
        body = raw[12:]
        if len(body) != 4 * k * d:
            raise CodebookFormatError(f"expected {k}x{d} float32 values, got {len(body)} bytes")
        words = np.frombuffer(body, dtype="<f4").reshape(k, d).astype(np.float64)
        return cls(words)


@dataclass
class FeatureVector:
    """Fixed-length image representation; ``kind`` is ``"bovw"`` or ``"deep"``."""

    values: np.ndarray
    kind: str = "bovw"
    model_id: str = ""
    empty: bool = False

    def __len__(self) -> int:
        return len(self.values)


def _sq_norms(x):
    return np.einsum("ij,ij->i", x, x)


def _assign(x: np.ndarray, centres: np.ndarray, x_sq: np.ndarray, rows=None):
    """Nearest centre per row, its exact squared distance, and the distance
    (not squared) to the runner-up centre, which serves as a lower bound."""
    rows = np.arange(len(x)) if rows is None else rows
    c_sq = _sq_norms(centres)
    labels = np.empty(len(rows), dtype=np.intp)
    second = np.full(len(rows), np.inf)
    for lo in range(0, len(rows), _ASSIGN_CHUNK):
        r = rows[lo:lo + _ASSIGN_CHUNK]
        d = x_sq[r, None] - 2.0 * (x[r] @ centres.T) + c_sq[None, :]
        best = np.argmin(d, axis=1)
        labels[lo:lo + len(r)] = best
        if len(centres) > 1:
            d[np.arange(len(r)), best] = np.inf
            second[lo:lo + len(r)] = d.min(axis=1)
    diff = x[rows] - centres[labels]
    return labels, _sq_norms(diff), np.sqrt(np.maximum(second, 0.0))


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = len(x)
    idx = [int(rng.integers(m))]
    x_sq = _sq_norms(x)

    def sq_dist_to(i):
        return np.maximum(x_sq - 2.0 * (x @ x[i]) + x_sq[i], 0.0)

    closest = sq_dist_to(idx[0])
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            nxt = int(rng.integers(m))
        else:
            cdf = np.cumsum(closest)
            nxt = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            nxt = min(nxt, m - 1)
        idx.append(nxt)
        closest = np.minimum(closest, sq_dist_to(nxt))
    return x[idx].copy()


def _update(x, labels, dist, k, old):
    onehot = sparse.csr_matrix((np.ones(len(x)), (labels, np.arange(len(x)))), shape=(k, len(x)))
    sums = onehot @ x
    counts = np.bincount(labels, minlength=k)
    centres = old.copy()
    filled = counts > 0
    centres[filled] = sums[filled] / counts[filled, None]
    empty = np.flatnonzero(~filled)
    if len(empty):
        # reseed each empty cluster on the point currently worst served
        order = np.argsort(-dist, kind="stable")
        for j, e in enumerate(empty):
            centres[e] = x[order[j]]
    return centres, len(empty)


def kmeans_fit(features, cfg: CodebookConfig) -> Codebook:
    """Lloyd's algorithm from a k-means++ start.

    Stops after ``cfg.max_iterations`` updates or once the Frobenius norm of
    the centroid shift drops below ``rel_tolerance`` times the norm of the
    centroids. ``history`` holds the inertia after every assignment step.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        x = x.reshape(len(x), -1)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("features contain NaN or inf")
    m = len(x)
    k = cfg.words
    if m < k:
        raise TooFewFeatures(m, k)
    rng = np.random.default_rng(cfg.seed)
    x_sq = _sq_norms(x)
    centres = _kmeans_pp(x, k, rng)
    # Hamerly's bounds: ``lower`` under-estimates the distance to the
    # second-closest centre, so a point whose distance to its own centre stays
    # below it (and below half the gap to the nearest other centre) keeps its
    # label without a full distance scan. Assignments match plain Lloyd.
    labels, dist, lower = _assign(x, centres, x_sq)
    move = None
    history = []
    it = 0
    while True:
        if move is not None:
            labels, dist, lower = _reassign(x, x_sq, centres, labels, lower, move)
        history.append(float(dist.sum()))
        if it == cfg.max_iterations or (move is not None and converged):
            break
        it += 1
        new, n_empty = _update(x, labels, dist, k, centres)
        move = np.linalg.norm(new - centres, axis=1)
        converged = np.sqrt(np.sum(move ** 2)) <= cfg.rel_tolerance * max(
            np.linalg.norm(centres), np.finfo(float).tiny)
        centres = new
        if n_empty:
            lower = np.zeros(m)  # reseeded centres invalidate every bound
    return Codebook(centres, inertia=history[-1], history=history, iterations=it)


_BOUND_SLACK = 1e-9


def _reassign(x, x_sq, centres, labels, lower, move):
    m, k = len(x), len(centres)
    diff = x - centres[labels]
    dist = _sq_norms(diff)
    if k == 1:
        return labels, dist, lower
    lower = lower - move.max()
    gaps = np.sqrt(np.maximum(_sq_norms(centres)[:, None] - 2.0 * centres @ centres.T
                              + _sq_norms(centres)[None, :], 0.0))
    np.fill_diagonal(gaps, np.inf)
    bound = np.maximum(lower, 0.5 * gaps.min(axis=1)[labels])
    upper = np.sqrt(dist)
    slack = _BOUND_SLACK * (1.0 + np.sqrt(x_sq) + np.sqrt(_sq_norms(centres)).max())
    rows = np.flatnonzero(upper + slack >= bound)
    if len(rows):
        new_labels, new_dist, new_lower = _assign(x, centres, x_sq, rows)
        labels = labels.copy()
        labels[rows], dist[rows], lower[rows] = new_labels, new_dist, new_lower
    return labels, dist, lower


def quantize(d, cb: Codebook) -> int:
    """Index of the Euclidean-nearest word; ties go to the lowest index."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (cb.words.shape[1],):
        raise DimensionMismatch(f"vector of shape {d.shape} vs codebook dim {cb.words.shape[1]}")
    dist = ((cb.words - d) ** 2).sum(axis=1)
    return int(np.argmin(dist))


def quantize_many(x: np.ndarray, cb: Codebook) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cb.words.shape[1]:
        raise DimensionMismatch(f"descriptors of shape {x.shape} vs codebook dim {cb.words.shape[1]}")
    words = cb.words
    out = np.empty(len(x), dtype=np.intp)
    w_sq = _sq_norms(words)
    for lo in range(0, len(x), _ASSIGN_CHUNK):
        block = x[lo:lo + _ASSIGN_CHUNK]
        b_sq = _sq_norms(block)
        d = b_sq[:, None] - 2.0 * (block @ words.T) + w_sq[None, :]
        best = d.min(axis=1)
        # the expanded form can misorder near-ties; settle those exactly
        slack = 1e-9 * (1.0 + b_sq + w_sq.max())
        near = d <= (best + slack)[:, None]
        idx = np.argmax(near, axis=1)
        for r in np.flatnonzero(near.sum(axis=1) > 1):
            cand = np.flatnonzero(near[r])
            exact = ((words[cand] - block[r]) ** 2).sum(axis=1)
            idx[r] = cand[np.argmin(exact)]
        out[lo:lo + len(block)] = idx
    return out


def word_counts(ds: DescriptorSet | np.ndarray, cb: Codebook) -> np.ndarray:
    values = ds.values if isinstance(ds, DescriptorSet) else np.asarray(ds, dtype=np.float64)
    values = values.reshape(-1, values.shape[-1] if values.size else DIM)
    return np.bincount(quantize_many(values, cb), minlength=cb.size).astype(np.float64)


def encode_histogram(ds: DescriptorSet | np.ndarray, cb: Codebook) -> FeatureVector:
    """L2-normalised word-frequency histogram of one image's descriptors.

    An image with no descriptors, or only all-zero descriptors, gives the zero
    vector with ``empty=True``.
    """
    values = ds.values if isinstance(ds, DescriptorSet) else np.asarray(ds, dtype=np.float64)
    if values.size and values.shape[-1] != cb.words.shape[1]:
        raise DimensionMismatch(f"descriptor dim {values.shape[-1]} vs codebook dim {cb.words.shape[1]}")
    if len(values) == 0 or not np.any(values):
        warnings.warn("descriptor set is empty or all-zero", EmptyHistogramWarning, stacklevel=2)
        return FeatureVector(np.zeros(cb.size), kind="bovw", empty=True)
    hist = word_counts(values, cb)
    return FeatureVector(hist / np.linalg.norm(hist), kind="bovw")
