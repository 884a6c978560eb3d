"""Curvature and gradient-noise matrices in dense, per-layer block, and diagonal form.

All four constructors average rank-one or rank-K contributions over a batch.
Contributions are accumulated in fixed chunks of examples, in input order,
so results do not depend on anything but the inputs. The diagonal is always
accumulated as an elementwise sum of squares; dense results carry exactly
that diagonal, so ``Diag`` and ``Block`` are exact extractions of ``Dense``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .grad import _onehot, batch_jacobians, grads_from_seeds
from .network import NetworkSpec, ParamVector, _as_batch, check_params, forward_cache, softmax

DEFAULT_DENSE_CAP = 5000
_CHUNK_ELEMENTS = 1 << 22


class Representation(str, enum.Enum):
    DENSE = "dense"
    BLOCK = "block"
    DIAG = "diag"


class ResourceCapError(RuntimeError):
    """A dense construction was requested above the configured size cap."""


def trace_of(diagonal: np.ndarray) -> float:
    return float(np.sum(np.ascontiguousarray(diagonal)))


@dataclass
class DenseSymMatrix:
    values: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def diagonal(self) -> np.ndarray:
        return np.ascontiguousarray(np.diagonal(self.values))

    def trace(self) -> float:
        return trace_of(self.diagonal())

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.values)[0])

    def is_psd(self, rtol: float = 1e-8) -> bool:
        d = self.dim
        return self.min_eigenvalue() >= -rtol * max(self.trace(), 0.0) / max(d, 1)


@dataclass
class BlockDiagMatrix:
    blocks: list[np.ndarray]

    @property
    def dim(self) -> int:
        return sum(b.shape[0] for b in self.blocks)

    def diagonal(self) -> np.ndarray:
        return np.concatenate([np.diagonal(b) for b in self.blocks])

    def trace(self) -> float:
        return trace_of(self.diagonal())

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        start = 0
        for b in self.blocks:
            stop = start + b.shape[0]
            out[start:stop, start:stop] = b
            start = stop
        return out


@dataclass
class DiagVector:
    values: np.ndarray

    def __post_init__(self):
        self.values = _clamp_diagonal(np.asarray(self.values, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.values.size

    def diagonal(self) -> np.ndarray:
        return self.values

    def trace(self) -> float:
        return trace_of(self.values)


def _clamp_diagonal(v: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise ValueError("diagonal has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(v)))) if v.size else 1.0
    if v.size and v.min() < -1e-12 * scale:
        raise ValueError(f"diagonal entry {v.min():.3e} is negative beyond rounding")
    return np.where(v < 0.0, 0.0, v)


class _Accumulator:
    """Sums row outer products and their diagonal in a fixed order."""

    def __init__(self, d: int, dense: bool):
        self.diag = np.zeros(d)
        self.dense = np.zeros((d, d)) if dense else None

    def add_rows(self, rows: np.ndarray) -> None:
        self.diag += np.sum(rows * rows, axis=0)
        if self.dense is not None:
            self.dense += rows.T @ rows

    def add_sandwich(self, jac: np.ndarray, hf_jac: np.ndarray) -> None:
        # sum_i J_i^T (H_f J)_i for (m, K, d) stacks
        self.diag += np.einsum("mkd,mkd->d", jac, hf_jac)
        if self.dense is not None:
            m, k, d = jac.shape
            self.dense += jac.reshape(m * k, d).T @ hf_jac.reshape(m * k, d)

    def finish(self, count: int, spec: NetworkSpec, representation: Representation):
        diag = _clamp_diagonal(self.diag / count)
        if representation is Representation.DIAG:
            return DiagVector(diag)
        m = self.dense / count
        asym = np.max(np.abs(m - m.T)) if m.size else 0.0
        if asym > 1e-10 * max(np.max(np.abs(m)), np.finfo(float).tiny):
            raise ArithmeticError(f"assembled matrix is not symmetric (max asymmetry {asym:.3e})")
        m = 0.5 * (m + m.T)
        m[np.diag_indices_from(m)] = diag
        if representation is Representation.DENSE:
            return DenseSymMatrix(m)
        return BlockDiagMatrix([m[s.start:s.stop, s.start:s.stop].copy() for s in spec.layout()])


def _prepare(spec, params, x, representation, cap):
    check_params(spec, params)
    xb, _ = _as_batch(spec, x)
    if xb.shape[0] == 0:
        raise ValueError("empty batch")
    representation = Representation(representation)
    d = len(params)
    if representation is not Representation.DIAG and d > cap:
        raise ResourceCapError(f"{representation.value} matrix with d={d} exceeds the cap of {cap}")
    return xb, representation, _Accumulator(d, representation is not Representation.DIAG)


def _chunks(n: int, per_example: int):
    step = max(1, _CHUNK_ELEMENTS // max(per_example, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def ggn(spec: NetworkSpec, params: ParamVector, x, y=None, representation=Representation.DENSE,
        cap: int = DEFAULT_DENSE_CAP):
    """Generalized Gauss-Newton matrix ``(1/n) sum_i J_i^T (diag p_i - p_i p_i^T) J_i``.

    Labels are accepted for signature symmetry and ignored.
    """
    xb, rep, acc = _prepare(spec, params, x, representation, cap)
    k, d = spec.num_classes, len(params)
    for sl in _chunks(xb.shape[0], k * d):
        jac = batch_jacobians(spec, params, xb[sl])
        p = softmax(forward_cache(spec, params, xb[sl])[0])
        hf = p[:, :, None] * np.eye(k)[None] - p[:, :, None] * p[:, None, :]
        acc.add_sandwich(jac, np.einsum("mkl,mld->mkd", hf, jac))
    return acc.finish(xb.shape[0], spec, rep)


def _label_gradients(spec, params, xb):
    """Gradients of the loss at every possible label, shape ``(m, K, d)``."""
    m, k = xb.shape[0], spec.num_classes
    p = softmax(forward_cache(spec, params, xb)[0])
    seeds = (p[:, None, :] - np.eye(k)[None, :, :]).reshape(m * k, k)
    rows = grads_from_seeds(spec, params, np.repeat(xb, k, axis=0), seeds)
    return p, rows.reshape(m, k, -1)


def fisher_exact(spec: NetworkSpec, params: ParamVector, x, y=None, representation=Representation.DENSE,
                 cap: int = DEFAULT_DENSE_CAP):
    """Fisher information with the expectation over labels taken in closed form.

    ``(1/n) sum_i sum_y p_i[y] g_{i,y} g_{i,y}^T`` where ``g_{i,y}`` is the
    loss gradient at input ``i`` had its label been ``y``.
    """
    xb, rep, acc = _prepare(spec, params, x, representation, cap)
    k, d = spec.num_classes, len(params)
    for sl in _chunks(xb.shape[0], k * d):
        p, g = _label_gradients(spec, params, xb[sl])
        acc.add_rows((np.sqrt(p)[:, :, None] * g).reshape(-1, d))
    return acc.finish(xb.shape[0], spec, rep)


def sample_model_labels(probs: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, m)`` labels drawn from each row's categorical distribution."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], m)) * cdf[:, -1:]
    labels = (u[:, :, None] >= cdf[:, None, :]).sum(axis=2)
    return np.minimum(labels, probs.shape[1] - 1)


def fisher_mc(spec: NetworkSpec, params: ParamVector, x, y=None, m: int = 1, seed=0,
              representation=Representation.DENSE, cap: int = DEFAULT_DENSE_CAP):
    """Monte Carlo Fisher: labels sampled from the model, ``m`` draws per input.

    Repeated draws of the same label are merged into one weighted outer
    product, which is the same estimator computed with fewer rows.
    """
    if m < 1:
        raise ValueError("need at least one sample per input")
    xb, rep, acc = _prepare(spec, params, x, representation, cap)
    rng = np.random.default_rng(seed)
    k, d = spec.num_classes, len(params)
    for sl in _chunks(xb.shape[0], k * d):
        p, g = _label_gradients(spec, params, xb[sl])
        draws = sample_model_labels(p, m, rng)
        counts = np.stack([(draws == c).sum(axis=1) for c in range(k)], axis=1)
        acc.add_rows((np.sqrt(counts / m)[:, :, None] * g).reshape(-1, d))
    return acc.finish(xb.shape[0], spec, rep)


def grad_covariance(spec: NetworkSpec, params: ParamVector, x, y, representation=Representation.DENSE,
                    cap: int = DEFAULT_DENSE_CAP):
    """Uncentered covariance ``(1/n) sum_i g_i g_i^T`` of per-example gradients."""
    xb, rep, acc = _prepare(spec, params, x, representation, cap)
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (xb.shape[0],):
        raise ValueError("labels do not match inputs")
    k, d = spec.num_classes, len(params)
    for sl in _chunks(xb.shape[0], d):
        p = softmax(forward_cache(spec, params, xb[sl])[0])
        acc.add_rows(grads_from_seeds(spec, params, xb[sl], p - _onehot(y[sl], k)))
    return acc.finish(xb.shape[0], spec, rep)


def hessian_fd(spec: NetworkSpec, params: ParamVector, x, y, eps: float = 1e-5) -> DenseSymMatrix:
    """Central-difference Hessian of the batch-mean loss, from exact gradients.

    Audit use only: costs ``2d`` batch gradients.
    """
    from .grad import loss_and_grad

    d = len(params)
    cols = np.empty((d, d))
    theta = params.values.copy()
    for j in range(d):
        theta[j] += eps
        gp = loss_and_grad(spec, ParamVector(theta, params.layout), x, y)[1]
        theta[j] -= 2 * eps
        gm = loss_and_grad(spec, ParamVector(theta, params.layout), x, y)[1]
        theta[j] += eps
        cols[j] = (gp - gm) / (2 * eps)
    return DenseSymMatrix(0.5 * (cols + cols.T))


MAX_NTK_SIZE = 2000


def ntk_gram(spec: NetworkSpec, params: ParamVector, probe_x) -> np.ndarray:
    """Empirical NTK Gram matrix ``J J^T`` over a probe batch, ``(mK, mK)``."""
    xb, _ = _as_batch(spec, probe_x)
    size = xb.shape[0] * spec.num_classes
    if xb.shape[0] == 0:
        raise ValueError("empty probe batch")
    if size > MAX_NTK_SIZE:
        raise ResourceCapError(f"NTK Gram of size {size} exceeds {MAX_NTK_SIZE}")
    jac = batch_jacobians(spec, params, xb).reshape(size, -1)
    gram = jac @ jac.T
    return 0.5 * (gram + gram.T)


def kernel_drift(gram: np.ndarray, gram0: np.ndarray) -> float:
    """Relative Frobenius change ``|K_t - K_0|_F / |K_0|_F``."""
    return float(np.linalg.norm(gram - gram0) / np.linalg.norm(gram0))


_MAGIC = b"TICM"
_TAGS = {Representation.DENSE: 0, Representation.BLOCK: 1, Representation.DIAG: 2}


def dump_matrix(matrix, path) -> None:
    """Write a matrix as little-endian float64 after a 16-byte header.

    Header: ``b"TICM"``, u32 dim, u32 representation tag (0 dense, 1 block,
    2 diagonal), u32 block count. Block files list the u32 block sizes
    before the row-major blocks.
    """
    if isinstance(matrix, DenseSymMatrix):
        tag, extra, payload = 0, 0, [matrix.values]
        sizes = b""
    elif isinstance(matrix, BlockDiagMatrix):
        tag, extra, payload = 1, len(matrix.blocks), matrix.blocks
        sizes = np.array([b.shape[0] for b in matrix.blocks], dtype="<u4").tobytes()
    elif isinstance(matrix, DiagVector):
        tag, extra, payload = 2, 0, [matrix.values]
        sizes = b""
    else:
        raise TypeError(f"cannot dump {type(matrix).__name__}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<III", matrix.dim, tag, extra))
        fh.write(sizes)
        for block in payload:
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_matrix(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError("not a TICM matrix file")
    dim, tag, extra = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if tag == 0:
        return DenseSymMatrix(np.frombuffer(body, dtype="<f8").reshape(dim, dim).copy())
    if tag == 2:
        return DiagVector(np.frombuffer(body, dtype="<f8").copy())
    if tag == 1:
        sizes = np.frombuffer(body[:4 * extra], dtype="<u4")
        data = np.frombuffer(body[4 * extra:], dtype="<f8")
        blocks, pos = [], 0
        for s in sizes:
            blocks.append(data[pos:pos + s * s].reshape(s, s).copy())
            pos += s * s
        return BlockDiagMatrix(blocks)
    raise ValueError(f"unknown representation tag {tag}")
