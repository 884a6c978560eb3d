"""Bias term ``Tr((H + lam I)^-1 C)`` of Takeuchi's information criterion.

Estimators at four fidelities share one damping value: exact (dense
Cholesky), per-layer blocks, diagonal, and the trace-ratio lower bound of
the diagonal form. ``tic_report`` assembles the matrices for a trained
network and runs whichever estimators the config asks for.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import lapack, solve_triangular

from . import curvature as cv
from .grad import gnvp, hvp
from .network import LabeledDataset, NetworkSpec, ParamVector, mean_loss

FIDELITIES = ("exact", "block", "diag", "lower_bound")


class CholeskyError(np.linalg.LinAlgError):
    """``H + lam I`` is not positive definite; more damping is needed."""

    def __init__(self, order: int, pivot: float, block: int | None = None):
        self.order, self.pivot, self.block = order, pivot, block
        where = f" in block {block}" if block is not None else ""
        super().__init__(f"Cholesky failed{where}: leading minor {order} has pivot {pivot:.3e}")


def _matrix(m) -> np.ndarray:
    return m.values if isinstance(m, cv.DenseSymMatrix) else np.asarray(m, dtype=np.float64)


def _chol_trace(h: np.ndarray, c: np.ndarray, lam: float, block: int | None = None) -> float:
    if h.shape != c.shape or h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError("H and C must be square matrices of the same size")
    if lam < 0:
        raise ValueError("damping must be nonnegative")
    a = h + lam * np.eye(h.shape[0])
    factor, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise CholeskyError(info, float(factor[info - 1, info - 1]), block)
    if info < 0:
        raise ValueError(f"dpotrf rejected argument {-info}")
    # Tr(L^-T L^-1 C) = Tr(L^-1 C L^-T)
    left = solve_triangular(factor, c, lower=True, check_finite=False)
    both = solve_triangular(factor, left.T, lower=True, check_finite=False)
    return float(np.trace(both))


def bias_exact(h, c, lam: float = 0.0) -> float:
    """Exact bias term via one Cholesky factorization and triangular solves."""
    return _chol_trace(_matrix(h), _matrix(c), lam)


def bias_block(h, c, lam: float = 0.0) -> float:
    """Sum of exact bias terms over matching diagonal blocks."""
    hb = h.blocks if isinstance(h, cv.BlockDiagMatrix) else list(h)
    cb = c.blocks if isinstance(c, cv.BlockDiagMatrix) else list(c)
    if len(hb) != len(cb):
        raise ValueError("block structures differ")
    return float(sum(_chol_trace(np.asarray(a), np.asarray(b), lam, i) for i, (a, b) in enumerate(zip(hb, cb))))


def bias_diag(h, c, lam: float = 0.0) -> float:
    h = h.values if isinstance(h, cv.DiagVector) else np.asarray(h, dtype=np.float64)
    c = c.values if isinstance(c, cv.DiagVector) else np.asarray(c, dtype=np.float64)
    if h.shape != c.shape:
        raise ValueError("diagonals have different lengths")
    denom = h + lam
    if np.any(denom <= 0):
        raise ValueError("diagonal of H + lam I has nonpositive entries")
    return float(np.sum(c / denom))


def bias_lower_bound(trace_c: float, trace_h: float) -> float:
    """``Tr(C) / Tr(H)``, which never exceeds the diagonal estimate."""
    if not trace_h > 0:
        raise ValueError("trace of H must be positive")
    if trace_c < 0:
        raise ValueError("trace of C must be nonnegative")
    return trace_c / trace_h


def hutchinson_trace(matvec: Callable[[np.ndarray], np.ndarray], d: int, num_samples: int = 64,
                     seed=0) -> tuple[float, float]:
    """Rademacher estimate of ``Tr(A)`` from products ``A v``.

    Returns the sample mean of ``v^T A v`` and its standard error.
    """
    if num_samples < 2:
        raise ValueError("need at least two probe vectors")
    rng = np.random.default_rng(seed)
    quad = np.empty(num_samples)
    for s in range(num_samples):
        v = rng.integers(0, 2, size=d).astype(np.float64) * 2.0 - 1.0
        quad[s] = v @ matvec(v)
    return float(quad.mean()), float(quad.std(ddof=1) / np.sqrt(num_samples))


def default_damping(trace_h: float, d: int) -> float:
    return max(1e-5 * trace_h / d, 1e-8)


@dataclass
class TicConfig:
    fidelities: tuple[str, ...] = ("diag", "lower_bound")
    split: str = "validation"
    damping: float | None = None
    curvature: str = "fisher"  # fisher | fisher_mc | hessian_fd
    mc_samples: int = 1
    trace_h_source: str = "matrix"  # matrix | hutchinson
    hutchinson_operator: str = "hessian"  # hessian | ggn
    hutchinson_samples: int = 64
    score_fidelity: str | None = None
    dense_cap: int = cv.DEFAULT_DENSE_CAP
    seed: int = 0

    def __post_init__(self):
        self.fidelities = tuple(self.fidelities)
        bad = set(self.fidelities) - set(FIDELITIES)
        if bad or not self.fidelities:
            raise ValueError(f"fidelities must be a nonempty subset of {FIDELITIES}")
        if self.curvature not in ("fisher", "fisher_mc", "hessian_fd"):
            raise ValueError(f"unknown curvature source {self.curvature!r}")
        if self.trace_h_source not in ("matrix", "hutchinson"):
            raise ValueError(f"unknown trace source {self.trace_h_source!r}")
        if self.hutchinson_operator not in ("hessian", "ggn"):
            raise ValueError(f"unknown Hutchinson operator {self.hutchinson_operator!r}")
        if self.score_fidelity is not None and self.score_fidelity not in self.fidelities:
            raise ValueError("score_fidelity must be one of the requested fidelities")
        if self.trace_h_source == "hutchinson" and set(self.fidelities) != {"lower_bound"}:
            raise ValueError("Hutchinson traces only serve the lower-bound fidelity")
        if self.damping is not None and self.damping < 0:
            raise ValueError("damping must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fidelities"] = list(self.fidelities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TicConfig":
        return cls(**d)


REPORT_FIELDS = (
    "bias_exact", "bias_block", "bias_diag", "bias_lower_bound",
    "trace_h", "trace_c", "trace_f", "damping_lambda",
    "mean_empirical_loss", "tic_score", "fidelity_flags",
    "score_fidelity", "n_train", "n_matrix", "num_params",
)


@dataclass
class TicReport:
    trace_h: float
    trace_c: float
    damping_lambda: float
    mean_empirical_loss: float
    tic_score: float
    score_fidelity: str
    n_train: int
    n_matrix: int
    num_params: int
    bias_exact: float | None = None
    bias_block: float | None = None
    bias_diag: float | None = None
    bias_lower_bound: float | None = None
    trace_f: float | None = None
    fidelity_flags: frozenset = field(default_factory=frozenset)

    def bias(self, fidelity: str) -> float | None:
        return getattr(self, f"bias_{fidelity}")

    def to_dict(self) -> dict:
        out = {}
        for name in REPORT_FIELDS:
            value = getattr(self, name)
            out[name] = sorted(value) if name == "fidelity_flags" else value
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _curvature_matrix(config, spec, params, x, y, rep):
    if config.curvature == "fisher":
        return cv.fisher_exact(spec, params, x, representation=rep, cap=config.dense_cap)
    if config.curvature == "fisher_mc":
        return cv.fisher_mc(spec, params, x, m=config.mc_samples, seed=config.seed,
                            representation=rep, cap=config.dense_cap)
    if len(params) > config.dense_cap:
        raise cv.ResourceCapError(f"finite-difference Hessian with d={len(params)} exceeds the cap")
    dense = cv.hessian_fd(spec, params, x, y)
    if rep is cv.Representation.DENSE:
        return dense
    if rep is cv.Representation.BLOCK:
        return cv.BlockDiagMatrix([dense.values[s.start:s.stop, s.start:s.stop].copy() for s in spec.layout()])
    return cv.DiagVector(dense.diagonal())


def _extract(matrix, rep, spec):
    if rep is cv.Representation.BLOCK and isinstance(matrix, cv.DenseSymMatrix):
        return cv.BlockDiagMatrix([matrix.values[s.start:s.stop, s.start:s.stop].copy() for s in spec.layout()])
    if rep is cv.Representation.DIAG:
        return cv.DiagVector(matrix.diagonal())
    return matrix


def tic_report(spec: NetworkSpec, params: ParamVector, dataset: LabeledDataset,
               config: TicConfig | None = None) -> TicReport:
    """All requested bias estimates for one trained parameter vector.

    Matrices come from ``config.split``; the empirical loss and the sample
    size ``n`` that scales the bias in ``tic_score`` come from the training
    split.
    """
    config = config or TicConfig()
    x, y = dataset.subset(config.split)
    if y.size == 0:
        raise ValueError(f"split {config.split!r} is empty")
    d = len(params)
    wanted = set(config.fidelities)
    if "exact" in wanted:
        rep = cv.Representation.DENSE
    elif "block" in wanted:
        rep = cv.Representation.BLOCK
    else:
        rep = cv.Representation.DIAG

    h_mat = c_mat = None
    if config.trace_h_source == "matrix":
        h_mat = _curvature_matrix(config, spec, params, x, y, rep)
        c_mat = cv.grad_covariance(spec, params, x, y, representation=rep, cap=config.dense_cap)
        trace_h = h_mat.trace()
        trace_c = c_mat.trace()
        trace_f = trace_h if config.curvature != "hessian_fd" else None
    else:
        c_diag = cv.grad_covariance(spec, params, x, y, representation=cv.Representation.DIAG)
        trace_c = c_diag.trace()
        if config.hutchinson_operator == "hessian":
            op = lambda v: hvp(spec, params, x, y, v)  # noqa: E731
        else:
            op = lambda v: gnvp(spec, params, x, v)  # noqa: E731
        trace_h, _ = hutchinson_trace(op, d, config.hutchinson_samples, config.seed)
        trace_f = None

    lam = config.damping if config.damping is not None else default_damping(max(trace_h, 0.0), d)
    results = {}
    if "exact" in wanted:
        results["exact"] = bias_exact(h_mat, c_mat, lam)
    if "block" in wanted:
        results["block"] = bias_block(_extract(h_mat, cv.Representation.BLOCK, spec),
                                      _extract(c_mat, cv.Representation.BLOCK, spec), lam)
    if "diag" in wanted:
        results["diag"] = bias_diag(_extract(h_mat, cv.Representation.DIAG, spec),
                                    _extract(c_mat, cv.Representation.DIAG, spec), lam)
    if "lower_bound" in wanted:
        results["lower_bound"] = bias_lower_bound(trace_c, trace_h)

    score_fidelity = config.score_fidelity or next(f for f in FIDELITIES if f in results)
    n_train = dataset.size("train")
    train_loss = mean_loss(spec, params, dataset, "train")
    return TicReport(
        trace_h=trace_h,
        trace_c=trace_c,
        trace_f=trace_f,
        damping_lambda=lam,
        mean_empirical_loss=train_loss,
        tic_score=train_loss + results[score_fidelity] / n_train,
        score_fidelity=score_fidelity,
        n_train=n_train,
        n_matrix=int(y.size),
        num_params=d,
        bias_exact=results.get("exact"),
        bias_block=results.get("block"),
        bias_diag=results.get("diag"),
        bias_lower_bound=results.get("lower_bound"),
        fidelity_flags=frozenset(results),
    )
