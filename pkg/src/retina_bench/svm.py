"""Kernel SVM trained with SMO, combined one-vs-one over the three classes."""

from __future__ import annotations

import itertools
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import ClassLabel

MODEL_MAGIC = b"RSM1"
SV_EPS = 1e-9
TAU = 1e-12
KERNELS = ("linear", "rbf")


class SvmError(ValueError):
    pass


class SingleClassInput(SvmError):
    pass


class NonFiniteInput(SvmError):
    pass


class DimensionMismatch(SvmError):
    pass


class MissingClass(SvmError):
    def __init__(self, label: ClassLabel):
        self.label = label
        super().__init__(f"no training examples for class {label.name}")


class ModelFormatError(SvmError):
    pass


class NoConvergence(UserWarning):
    pass


@dataclass(frozen=True)
class SvmConfig:
    C: float = 8.0
    kernel: str = "linear"
    gamma: float | None = None  # rbf only; None means 1 / n_features
    kkt_tolerance: float = 1e-3
    max_passes: int = 100_000  # SMO pair updates

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be > 0")
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not self.kkt_tolerance > 0:
            raise ValueError("kkt_tolerance must be > 0")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")

    def resolved_gamma(self, dim: int) -> float:
        return self.gamma if self.gamma is not None else 1.0 / dim


def kernel_eval(kernel: str, x, y, gamma: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatch(f"{x.shape} vs {y.shape}")
    if kernel == "linear":
        return float(x @ y)
    if kernel == "rbf":
        d = x - y
        return float(np.exp(-gamma * (d @ d)))
    raise ValueError(f"unknown kernel {kernel!r}")


def kernel_matrix(kernel: str, a: np.ndarray, b: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"feature dims {a.shape[1]} vs {b.shape[1]}")
    if kernel == "linear":
        return a @ b.T
    sq = (np.einsum("ij,ij->i", a, a)[:, None] - 2.0 * (a @ b.T)
          + np.einsum("ij,ij->i", b, b)[None, :])
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass
class BinarySvmModel:
    """Decision function ``f(x) = sum_i coef_i K(sv_i, x) + bias`` with coef = alpha * y."""

    support_vectors: np.ndarray
    dual_coef: np.ndarray
    bias: float
    kernel: str = "linear"
    gamma: float = 1.0
    # training diagnostics, not serialised
    alpha: np.ndarray | None = field(default=None, repr=False)
    support: np.ndarray | None = field(default=None, repr=False)
    iterations: int = 0
    converged: bool = True
    objective_history: list[float] = field(default_factory=list, repr=False)

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if len(self.dual_coef) == 0:
            return np.full(len(x), self.bias)
        if x.shape[1] != self.support_vectors.shape[1]:
            raise DimensionMismatch(f"input dim {x.shape[1]} vs model dim {self.support_vectors.shape[1]}")
        return kernel_matrix(self.kernel, x, self.support_vectors, self.gamma) @ self.dual_coef + self.bias


def dual_objective(alpha: np.ndarray, y: np.ndarray, k: np.ndarray) -> float:
    """``sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij``."""
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ k @ ay)


def _check_xy(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.ndim == 1:
        x = x[:, None]
    if len(x) != len(y):
        raise DimensionMismatch(f"{len(x)} samples vs {len(y)} labels")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NonFiniteInput("training data contain NaN or inf")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise SvmError("binary labels must be +1 or -1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise SingleClassInput("both +1 and -1 examples are required")
    return x, y


def solve_smo(k: np.ndarray, y: np.ndarray, C: float, eps: float, max_iter: int,
              record_objective: bool = False):
    """Minimise ``1/2 a'Qa - e'a`` s.t. ``0 <= a <= C``, ``y'a = 0`` with ``Q = yy' * K``.

    Working set = maximal violating pair. Returns ``(alpha, bias, iterations,
    converged, objective_history)``; the history holds the (maximisation)
    dual objective after every update.
    """
    n = len(y)
    q = (y[:, None] * y[None, :]) * k
    qd = np.diag(q).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)
    pos = y > 0
    neg = ~pos
    history = []
    converged = False
    it = 0
    while it < max_iter:
        up = (pos & (alpha < C)) | (neg & (alpha > 0))
        low = (neg & (alpha < C)) | (pos & (alpha > 0))
        ygrad = -y * grad
        i = int(np.argmax(np.where(up, ygrad, -np.inf)))
        j = int(np.argmin(np.where(low, ygrad, np.inf)))
        if not up[i] or not low[j] or ygrad[i] - ygrad[j] < eps:
            converged = True
            break
        it += 1
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = qd[i] + qd[j] + 2 * q[i, j]
            if quad <= 0:
                quad = TAU
            delta = (-grad[i] - grad[j]) / quad
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            quad = qd[i] + qd[j] - 2 * q[i, j]
            if quad <= 0:
                quad = TAU
            delta = (grad[i] - grad[j]) / quad
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
            elif nj < 0:
                nj, ni = 0.0, total
            if total > C:
                if nj > C:
                    nj, ni = C, total - C
            elif ni < 0:
                ni, nj = 0.0, total
        alpha[i], alpha[j] = ni, nj
        grad += q[:, i] * (ni - ai) + q[:, j] * (nj - aj)
        if record_objective:
            history.append(float(-0.5 * alpha @ (grad - 1.0)))
    return alpha, _bias(alpha, grad, y, C), it, converged, history


def _bias(alpha, grad, y, C):
    yg = y * grad
    at_upper = alpha >= C
    at_lower = alpha <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        rho = yg[free].mean()
    else:
        ub_mask = (at_upper & (y < 0)) | (at_lower & (y > 0))
        lb_mask = (at_upper & (y > 0)) | (at_lower & (y < 0))
        ub = yg[ub_mask].min() if ub_mask.any() else np.inf
        lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
        rho = (ub + lb) / 2
    return float(-rho)


def train_binary(x, y, cfg: SvmConfig = SvmConfig(), record_objective: bool = False) -> BinarySvmModel:
    x, y = _check_xy(x, y)
    gamma = cfg.resolved_gamma(x.shape[1])
    k = kernel_matrix(cfg.kernel, x, x, gamma)
    alpha, bias, it, converged, history = solve_smo(
        k, y, cfg.C, cfg.kkt_tolerance, cfg.max_passes, record_objective)
    if not converged:
        warnings.warn(f"SMO stopped after {it} updates without meeting the KKT tolerance",
                      NoConvergence, stacklevel=2)
    sv = np.flatnonzero(alpha > SV_EPS)
    return BinarySvmModel(
        support_vectors=x[sv].copy(), dual_coef=(alpha * y)[sv], bias=bias,
        kernel=cfg.kernel, gamma=gamma, alpha=alpha, support=sv,
        iterations=it, converged=converged, objective_history=history,
    )


def kkt_violations(model: BinarySvmModel, x, y, C: float) -> np.ndarray:
    """Per-point violation of the KKT conditions of the trained model (0 when satisfied)."""
    x, y = _check_xy(x, y)
    margin = y * model.decision_function(x)
    a = model.alpha
    viol = np.zeros(len(y))
    lower = a <= SV_EPS
    upper = a >= C - SV_EPS
    free = ~(lower | upper)
    viol[lower] = np.maximum(0.0, 1.0 - margin[lower])
    viol[upper] = np.maximum(0.0, margin[upper] - 1.0)
    viol[free] = np.abs(margin[free] - 1.0)
    return viol


# ------------------------------------------------------------ multi-class

PAIRS = tuple(itertools.combinations(ClassLabel, 2))


@dataclass
class MultiClassSvmModel:
    """One binary model per class pair ``(a, b)``; positive decision votes for ``a``."""

    models: dict[tuple[ClassLabel, ClassLabel], BinarySvmModel]
    C: float = 8.0

    @property
    def dim(self) -> int:
        for m in self.models.values():
            if len(m.dual_coef):
                return m.support_vectors.shape[1]
        return 0

    def pairwise_decisions(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.stack([self.models[p].decision_function(x) for p in PAIRS], axis=1)

    def predict_many(self, x: np.ndarray) -> np.ndarray:
        dec = self.pairwise_decisions(x)
        out = np.empty(len(dec), dtype=np.intp)
        for n, row in enumerate(dec):
            votes = np.zeros(len(ClassLabel))
            strength = np.zeros(len(ClassLabel))
            for (a, b), d in zip(PAIRS, row):
                winner = a if d > 0 else b
                votes[winner] += 1
                strength[winner] += abs(d)
            best = np.flatnonzero(votes == votes.max())
            if len(best) > 1:
                s = strength[best]
                best = best[s == s.max()]
            out[n] = best[0]
        return out

    def save(self, path) -> None:
        first = next(iter(self.models.values()))
        dim = self.dim
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<IddII", KERNELS.index(first.kernel), first.gamma, self.C,
                                 dim, len(self.models)))
            for (a, b) in PAIRS:
                m = self.models[(a, b)]
                fh.write(struct.pack("<IIdI", int(a), int(b), m.bias, len(m.dual_coef)))
                fh.write(np.asarray(m.support_vectors, dtype="<f4").reshape(-1).tobytes())
                fh.write(np.asarray(m.dual_coef, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "MultiClassSvmModel":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != MODEL_MAGIC:
            raise ModelFormatError("bad magic")
        try:
            kcode, gamma, C, dim, n_models = struct.unpack_from("<IddII", raw, 4)
            off = 4 + struct.calcsize("<IddII")
            models = {}
            for _ in range(n_models):
                a, b, bias, n_sv = struct.unpack_from("<IIdI", raw, off)
                off += struct.calcsize("<IIdI")
                sv = np.frombuffer(raw, "<f4", n_sv * dim, off).reshape(n_sv, dim).astype(np.float64)
                off += 4 * n_sv * dim
                coef = np.frombuffer(raw, "<f4", n_sv, off).astype(np.float64)
                off += 4 * n_sv
                models[(ClassLabel(a), ClassLabel(b))] = BinarySvmModel(
                    sv, coef, bias, kernel=KERNELS[kcode], gamma=gamma)
        except (struct.error, ValueError, IndexError) as exc:
            raise ModelFormatError(f"corrupt model file: {exc}") from exc
        if off != len(raw):
            raise ModelFormatError("trailing bytes after model payload")
        return cls(models, C=C)


def train_multiclass(x, labels, cfg: SvmConfig = SvmConfig()) -> MultiClassSvmModel:
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray([int(v) for v in labels])
    if len(x) != len(labels):
        raise DimensionMismatch(f"{len(x)} samples vs {len(labels)} labels")
    for c in ClassLabel:
        if not np.any(labels == c):
            raise MissingClass(c)
    # one gamma for all pairs so the default tracks the full feature dim
    cfg = replace(cfg, gamma=cfg.resolved_gamma(x.shape[1]))
    models = {}
    for a, b in PAIRS:
        mask = (labels == a) | (labels == b)
        y = np.where(labels[mask] == a, 1.0, -1.0)
        models[(a, b)] = train_binary(x[mask], y, cfg)
    return MultiClassSvmModel(models, C=cfg.C)


def predict(model: MultiClassSvmModel, x) -> ClassLabel:
    """Majority vote; ties go to the larger summed |decision| of won pairs, then the lowest label."""
    x = np.asarray(x, dtype=np.float64)
    dim = model.dim
    if dim and x.shape != (dim,):
        raise DimensionMismatch(f"input shape {x.shape} vs model dim {dim}")
    return ClassLabel(int(model.predict_many(x[None])[0]))
