"""Hot training kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; setting ``TICNET_PURE_PYTHON=1``
before import, or calling :func:`set_backend`, selects the numpy path. Both
compute the same quantities and agree to rounding.
"""

from __future__ import annotations

import os

import numpy as np

from . import grad as _grad
from .network import Activation, NetworkSpec, ParamVector

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_backend = "compiled" if _ckernels is not None and not os.environ.get("TICNET_PURE_PYTHON") else "python"


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _ckernels is not None else [])


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in available_backends():
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    _backend = name


class _LayoutArrays:
    __slots__ = ("fan_in", "fan_out", "w_off", "b_off", "relu", "skip")

    def __init__(self, spec: NetworkSpec):
        segs = spec.layout()
        self.fan_in = np.array([s.fan_in for s in segs], dtype=np.intc)
        self.fan_out = np.array([s.fan_out for s in segs], dtype=np.intc)
        self.w_off = np.array([s.weight_offset for s in segs], dtype=np.int_)
        self.b_off = np.array([s.bias_offset for s in segs], dtype=np.int_)
        self.relu = spec.activation is Activation.RELU
        self.skip = spec.skip_connections


_layout_cache: dict[NetworkSpec, _LayoutArrays] = {}


def batch_loss_grad(spec: NetworkSpec, params: ParamVector, x: np.ndarray, y: np.ndarray,
                    out: np.ndarray | None = None, backend: str | None = None) -> tuple[float, np.ndarray]:
    """Mean loss of a batch and its gradient, via the selected backend."""
    backend = backend or _backend
    if backend == "python" or x.shape[0] == 0:
        loss, g = _grad.loss_and_grad(spec, params, x, y)
        if out is not None:
            out[:] = g
            g = out
        return loss, g
    if _ckernels is None:
        raise RuntimeError("compiled backend unavailable")
    lay = _layout_cache.get(spec)
    if lay is None:
        lay = _layout_cache[spec] = _LayoutArrays(spec)
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int_)
    if x.ndim != 2 or x.shape[1] != spec.input_dim or y.shape != (x.shape[0],):
        raise _grad.DimensionError("batch does not match the network spec")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    g = np.empty(len(params)) if out is None else out
    loss = _ckernels.batch_loss_grad(params.values, lay.fan_in, lay.fan_out, lay.w_off, lay.b_off,
                                     x, y, lay.relu, lay.skip, g)
    return loss, g


def momentum_step(theta: np.ndarray, velocity: np.ndarray, g: np.ndarray, eta: float,
                  weight_decay: float, momentum: float, backend: str | None = None) -> None:
    """In-place heavy-ball update with coupled weight decay."""
    backend = backend or _backend
    if backend == "compiled" and _ckernels is not None:
        _ckernels.momentum_step(theta, velocity, g, eta, weight_decay, momentum)
        return
    velocity *= momentum
    velocity -= eta * (g + weight_decay * theta)
    theta += velocity
