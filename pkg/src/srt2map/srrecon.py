"""TV-regularized super-resolution reconstruction from several LR stacks.

Minimizes ``lam/2 * sum_k ||H_k x - y_k||^2 + TV(x)`` with a first-order
primal-dual (Chambolle-Pock) iteration on ``K = [sqrt(lam) H_1; ...; grad]``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .volgrid import Grid3D, Volume3D

logger = logging.getLogger(__name__)

# Power iteration approaches ||K|| from below; a short run on a large grid
# lands about 1% low, which would break tau * sigma * ||K||^2 <= 1.
NORM_SAFETY = 1.02


class NumericFailure(RuntimeError):
    """Non-finite values appeared during the iteration."""

    def __init__(self, iteration: int, what: str = "iterate"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 0.75
    max_iters: int = 300
    rel_tol: float = 1e-5
    operator_norm_iters: int = 30
    tv_epsilon: float = 1e-12  # floor under the dual magnitude in the TV projection

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.operator_norm_iters < 1:
            raise ValueError("operator_norm_iters must be >= 1")


def gradient(x: np.ndarray) -> np.ndarray:
    """Forward differences, zero at the last index of each axis. Shape ``(3, *x.shape)``."""
    g = np.zeros((x.ndim,) + x.shape)
    for a in range(x.ndim):
        src = [slice(None)] * x.ndim
        dst = [slice(None)] * x.ndim
        src[a] = slice(1, None)
        dst[a] = slice(None, -1)
        g[(a,) + tuple(dst)] = x[tuple(src)] - x[tuple(dst)]
    return g


def divergence(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`gradient`."""
    d = np.zeros(p.shape[1:])
    nd = d.ndim
    for a in range(nd):
        head = [slice(None)] * nd
        head[a] = slice(None, -1)
        tail = [slice(None)] * nd
        tail[a] = slice(1, None)
        d[tuple(head)] += p[(a,) + tuple(head)]
        d[tuple(tail)] -= p[(a,) + tuple(head)]
    return d


def _tv(x: np.ndarray) -> float:
    return float(np.sum(np.sqrt(np.sum(gradient(x) ** 2, axis=0))))


def tv_seminorm(x: Volume3D | np.ndarray) -> float:
    """Isotropic TV in index units with replicate boundary."""
    arr = x.data if isinstance(x, Volume3D) else x
    return _tv(np.asarray(arr, dtype=float))


class GradientOperator:
    """Adapter so the finite-difference gradient can join an operator stack."""

    def __init__(self, shape):
        self.hr_shape = tuple(shape)

    def forward(self, x):
        return gradient(x)

    def backward(self, p):
        return -divergence(p)


class MatrixOperator:
    """Dense matrix acting on flat vectors, for testing the stack machinery."""

    def __init__(self, mat):
        self.mat = np.asarray(mat, dtype=float)
        self.hr_shape = (self.mat.shape[1],)

    def forward(self, x):
        return self.mat @ x

    def backward(self, y):
        return self.mat.T @ y


def estimate_operator_norm(ops, iters: int, weights=None, seed: int = 0) -> float:
    """Power-iteration estimate of ``||[w_1 A_1; w_2 A_2; ...]||``.

    The estimate after ``n`` steps is ``||K x_n||`` for unit ``x_n`` proportional
    to ``(K^T K)^n x_0``; it never decreases with ``n``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    ops = list(ops)
    weights = np.ones(len(ops)) if weights is None else np.asarray(weights, dtype=float)
    shape = ops[0].hr_shape
    x = np.random.default_rng(seed).standard_normal(shape)
    x /= np.linalg.norm(x)

    def gram(v):
        return sum(w * w * op.backward(op.forward(v)) for w, op in zip(weights, ops))

    def knorm(v):
        return np.sqrt(sum(w * w * np.sum(op.forward(v) ** 2) for w, op in zip(weights, ops)))

    est = knorm(x)
    for _ in range(iters):
        v = gram(x)
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        x = v / nv
        est = max(est, knorm(x))
    return float(est)


@dataclass
class SRProblem:
    series: list  # (LRSeries, ForwardOperator) pairs
    target_grid: Grid3D
    config: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not self.series:
            raise ValueError("SR problem needs at least one series")
        tes = {round(s.te, 9) for s, _ in self.series}
        if len(tes) != 1:
            raise ValueError(f"all series must share one TE, got {sorted(tes)}")
        for s, op in self.series:
            if not op.hr_grid.same_as(self.target_grid):
                raise ValueError("operator HR grid differs from the target grid")
            if s.data.shape != op.lr_shape:
                raise ValueError("series data does not match its operator's LR shape")

    @property
    def te(self) -> float:
        return self.series[0][0].te


def _fidelity(residuals) -> float:
    return float(sum(np.sum(r * r) for r in residuals))


def objective(x: Volume3D | np.ndarray, prob: SRProblem) -> float:
    """``lam/2 * sum_k ||H_k x - y_k||^2 + TV(x)``."""
    if isinstance(x, Volume3D):
        if not x.grid.same_as(prob.target_grid):
            raise ValueError("x is not on the problem's target grid")
        x = x.data
    x = np.asarray(x, dtype=float)
    if x.shape != prob.target_grid.dims:
        raise ValueError("x is not on the problem's target grid")
    res = [op.forward(x) - s.data for s, op in prob.series]
    return 0.5 * prob.config.lam * _fidelity(res) + _tv(x)


@dataclass
class ConvergenceReport:
    objective: list = field(default_factory=list)
    fidelity: list = field(default_factory=list)
    tv: list = field(default_factory=list)
    rel_change: list = field(default_factory=list)
    converged: bool = False
    operator_norm: float = float("nan")

    @property
    def iterations(self) -> int:
        return len(self.objective) - 1

    def append(self, fid: float, tv: float, lam: float, rel: float):
        self.fidelity.append(fid)
        self.tv.append(tv)
        self.objective.append(0.5 * lam * fid + tv)
        self.rel_change.append(rel)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "objective", "fidelity", "tv", "rel_change"])
            for i, row in enumerate(zip(self.objective, self.fidelity, self.tv, self.rel_change)):
                w.writerow([i, *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path) -> "ConvergenceReport":
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep.objective.append(float(row["objective"]))
                rep.fidelity.append(float(row["fidelity"]))
                rep.tv.append(float(row["tv"]))
                rep.rel_change.append(float(row["rel_change"]))
        return rep


def initial_estimate(prob: SRProblem) -> np.ndarray:
    """Normalized back-projection ``sum_k H_k^T y_k / sum_k H_k^T 1``."""
    num = sum(op.backward(np.asarray(s.data)) for s, op in prob.series)
    den = sum(op.backward(np.ones(op.lr_shape)) for _, op in prob.series)
    return num / np.maximum(den, 1e-6 * den.max())


def sr_reconstruct(prob: SRProblem, x0: np.ndarray | None = None) -> tuple[Volume3D, ConvergenceReport]:
    """Primal-dual minimization of the SR objective for one TE.

    Returns the reconstructed volume and the per-iteration history; entry 0
    of the history describes the starting point.
    """
    cfg = prob.config
    ops = [op for _, op in prob.series]
    ys = [np.asarray(s.data, dtype=float) for s, _ in prob.series]
    root_lam = np.sqrt(cfg.lam)
    grad_op = GradientOperator(prob.target_grid.dims)
    norm = NORM_SAFETY * estimate_operator_norm(
        ops + [grad_op], cfg.operator_norm_iters, [root_lam] * len(ops) + [1.0]
    )
    tau = sigma = 0.99 / norm

    x = initial_estimate(prob) if x0 is None else np.array(x0, dtype=float)
    hx = [op.forward(x) for op in ops]
    gx = gradient(x)
    report = ConvergenceReport(operator_norm=norm)
    report.append(_fidelity([h - y for h, y in zip(hx, ys)]), float(np.sum(np.sqrt(np.sum(gx * gx, 0)))), cfg.lam, float("nan"))

    q = [np.zeros_like(y) for y in ys]
    p = np.zeros_like(gx)
    hbar, gbar = hx, gx
    for it in range(1, cfg.max_iters + 1):
        for k in range(len(ops)):
            q[k] = (q[k] + sigma * root_lam * (hbar[k] - ys[k])) / (1.0 + sigma)
        p += sigma * gbar
        mag = np.sqrt(np.sum(p * p, axis=0) + cfg.tv_epsilon ** 2)
        p /= np.maximum(1.0, mag)

        step = root_lam * sum(op.backward(qk) for op, qk in zip(ops, q)) - divergence(p)
        x_new = x - tau * step
        hx_new = [op.forward(x_new) for op in ops]
        gx_new = gradient(x_new)

        fid = _fidelity([h - y for h, y in zip(hx_new, ys)])
        tv = float(np.sum(np.sqrt(np.sum(gx_new * gx_new, 0))))
        rel = float(np.linalg.norm(x_new - x) / max(np.linalg.norm(x), 1e-300))
        if not (np.isfinite(fid) and np.isfinite(tv) and np.isfinite(rel)):
            raise NumericFailure(it)
        report.append(fid, tv, cfg.lam, rel)

        hbar = [2 * a - b for a, b in zip(hx_new, hx)]
        gbar = 2 * gx_new - gx
        x, hx, gx = x_new, hx_new, gx_new
        if rel < cfg.rel_tol:
            report.converged = True
            break
    logger.debug("SR TE=%.1f: %d iterations, objective %.6g -> %.6g",
                 prob.te, report.iterations, report.objective[0], report.objective[-1])
    return Volume3D(prob.target_grid, x), report
