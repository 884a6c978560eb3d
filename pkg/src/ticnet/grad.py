"""Reverse-mode derivatives of the softmax cross-entropy through an MLP.

Every rule is written out per layer; there is no general tape. ReLU's
derivative at exactly zero is taken to be zero.
"""

from __future__ import annotations

import numpy as np

from .network import (
    Activation,
    DimensionError,
    NetworkSpec,
    ParamVector,
    _as_batch,
    check_params,
    forward_cache,
    log_softmax,
    softmax,
)


def _masks(spec: NetworkSpec, preacts):
    if spec.activation is Activation.RELU:
        return [(z > 0).astype(np.float64) for z in preacts]
    return [None] * len(preacts)


def backprop_deltas(spec: NetworkSpec, params: ParamVector, inputs, preacts, dlogits):
    """Gradients of a scalar w.r.t. each layer's pre-activation.

    ``dlogits`` holds one row per example: the derivative of that example's
    scalar with respect to its logits. Returns one ``(n, fan_out)`` array per
    affine layer in forward order.
    """
    layers = list(params.layers())
    masks = _masks(spec, preacts)
    deltas = [None] * len(layers)
    deltas[-1] = dlogits
    dh = dlogits @ layers[-1][0]
    for index in range(len(layers) - 2, -1, -1):
        mask = masks[index]
        dz = dh if mask is None else dh * mask
        deltas[index] = dz
        if index == 0:
            break
        dprev = dz @ layers[index][0]
        dh = dprev + dh if spec.skip_connections and index > 0 else dprev
    return deltas


def _sum_grad(params: ParamVector, inputs, deltas) -> np.ndarray:
    out = np.empty(len(params))
    for seg, h, dz in zip(params.layout, inputs, deltas):
        out[seg.weight_offset:seg.bias_offset] = (dz.T @ h).ravel()
        out[seg.bias_offset:seg.stop] = dz.sum(axis=0)
    return out


def _rows_grad(params: ParamVector, inputs, deltas) -> np.ndarray:
    n = deltas[0].shape[0]
    out = np.empty((n, len(params)))
    for seg, h, dz in zip(params.layout, inputs, deltas):
        out[:, seg.weight_offset:seg.bias_offset] = (dz[:, :, None] * h[:, None, :]).reshape(n, -1)
        out[:, seg.bias_offset:seg.stop] = dz
    return out


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _labels(y, n: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.size != n:
        raise DimensionError(f"{n} inputs but {y.size} labels")
    return y


def loss_and_grad(spec: NetworkSpec, params: ParamVector, x, y) -> tuple[float, np.ndarray]:
    """Mean loss over a batch and its gradient (pure numpy path)."""
    check_params(spec, params)
    xb, _ = _as_batch(spec, x)
    y = _labels(y, xb.shape[0])
    if y.size == 0:
        raise ValueError("empty batch")
    logits, inputs, preacts = forward_cache(spec, params, xb)
    logp = log_softmax(logits)
    n = y.size
    loss = -logp[np.arange(n), y].mean()
    dlogits = (np.exp(logp) - _onehot(y, spec.num_classes)) / n
    return float(loss), _sum_grad(params, inputs, backprop_deltas(spec, params, inputs, preacts, dlogits))


def grad(spec: NetworkSpec, params: ParamVector, x, label) -> np.ndarray:
    """Gradient of the loss of one example, or of the mean loss of a batch."""
    return loss_and_grad(spec, params, x, label)[1]


def grads_from_seeds(spec: NetworkSpec, params: ParamVector, x, seeds) -> np.ndarray:
    """Per-row parameter gradients of ``seeds[i] . logits(x[i])``.

    Row ``i`` of the result is ``J_i^T seeds[i]``, with ``J_i`` the output
    Jacobian at input ``i``.
    """
    check_params(spec, params)
    xb, _ = _as_batch(spec, x)
    seeds = np.asarray(seeds, dtype=np.float64).reshape(xb.shape[0], spec.num_classes)
    _, inputs, preacts = forward_cache(spec, params, xb)
    return _rows_grad(params, inputs, backprop_deltas(spec, params, inputs, preacts, seeds))


def per_sample_grads(spec: NetworkSpec, params: ParamVector, x, y) -> np.ndarray:
    """One loss gradient per example, stacked as rows of an ``(n, d)`` array."""
    check_params(spec, params)
    xb, _ = _as_batch(spec, x)
    y = _labels(y, xb.shape[0])
    if y.size == 0:
        raise ValueError("empty batch")
    logits, inputs, preacts = forward_cache(spec, params, xb)
    seeds = softmax(logits) - _onehot(y, spec.num_classes)
    return _rows_grad(params, inputs, backprop_deltas(spec, params, inputs, preacts, seeds))


def output_jacobian(spec: NetworkSpec, params: ParamVector, x) -> np.ndarray:
    """``(K, d)`` Jacobian of the logits at one input; one backward pass per logit."""
    xb, single = _as_batch(spec, x)
    if not single and xb.shape[0] != 1:
        raise DimensionError("output_jacobian takes a single input vector")
    k = spec.num_classes
    return grads_from_seeds(spec, params, np.repeat(xb, k, axis=0), np.eye(k))


def batch_jacobians(spec: NetworkSpec, params: ParamVector, x) -> np.ndarray:
    """Output Jacobians for every row of ``x`` as an ``(n, K, d)`` array."""
    xb, _ = _as_batch(spec, x)
    n, k = xb.shape[0], spec.num_classes
    seeds = np.tile(np.eye(k), (n, 1))
    return grads_from_seeds(spec, params, np.repeat(xb, k, axis=0), seeds).reshape(n, k, -1)


def _r_forward(spec, params, direction, xb):
    """Forward pass with its directional derivative along ``direction``."""
    relu = spec.activation is Activation.RELU
    layers = list(params.layers())
    dlayers = list(direction.layers())
    inputs, rinputs, preacts = [], [], []
    h, rh = xb, np.zeros_like(xb)
    for index, ((w, b), (vw, vb)) in enumerate(zip(layers[:-1], dlayers[:-1])):
        inputs.append(h)
        rinputs.append(rh)
        z = h @ w.T + b
        rz = h @ vw.T + rh @ w.T + vb
        preacts.append(z)
        if relu:
            mask = z > 0
            a, ra = np.where(mask, z, 0.0), np.where(mask, rz, 0.0)
        else:
            a, ra = z, rz
        if spec.skip_connections and index > 0:
            h, rh = a + h, ra + rh
        else:
            h, rh = a, ra
    (w, b), (vw, vb) = layers[-1], dlayers[-1]
    inputs.append(h)
    rinputs.append(rh)
    return h @ w.T + b, h @ vw.T + rh @ w.T + vb, inputs, rinputs, preacts


def _check_direction(spec, params, v) -> ParamVector:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (len(params),):
        raise DimensionError(f"direction has shape {v.shape}, expected ({len(params)},)")
    if not np.all(np.isfinite(v)):
        raise ValueError("direction must be finite")
    return ParamVector(v, params.layout)


def _softmax_hessian_apply(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    # rows of (diag(p) - p p^T) u
    return p * u - p * np.sum(p * u, axis=1, keepdims=True)


def hvp(spec: NetworkSpec, params: ParamVector, x, y, v) -> np.ndarray:
    """Hessian of the batch-mean loss times ``v`` (forward-over-reverse).

    This is the full Hessian, including the cross-layer terms that the
    Gauss-Newton matrix drops; see :func:`gnvp` for the latter.
    """
    check_params(spec, params)
    xb, _ = _as_batch(spec, x)
    y = _labels(y, xb.shape[0])
    if y.size == 0:
        raise ValueError("empty batch")
    direction = _check_direction(spec, params, v)
    n = y.size
    logits, rlogits, inputs, rinputs, preacts = _r_forward(spec, params, direction, xb)
    p = softmax(logits)
    g = (p - _onehot(y, spec.num_classes)) / n
    rg = _softmax_hessian_apply(p, rlogits) / n

    layers = list(params.layers())
    dlayers = list(direction.layers())
    masks = _masks(spec, preacts)
    out = np.empty(len(params))
    dz, rdz = g, rg
    dh = rdh = None
    for index in range(len(layers) - 1, -1, -1):
        seg = params.layout[index]
        (w, _), (vw, _) = layers[index], dlayers[index]
        if index < len(layers) - 1:
            mask = masks[index]
            dz = dh if mask is None else dh * mask
            rdz = rdh if mask is None else rdh * mask
        h, rh = inputs[index], rinputs[index]
        out[seg.weight_offset:seg.bias_offset] = (rdz.T @ h + dz.T @ rh).ravel()
        out[seg.bias_offset:seg.stop] = rdz.sum(axis=0)
        if index == 0:
            break
        new_dh = dz @ w
        new_rdh = dz @ vw + rdz @ w
        if spec.skip_connections and index < len(layers) - 1 and index > 0:
            new_dh = new_dh + dh
            new_rdh = new_rdh + rdh
        dh, rdh = new_dh, new_rdh
    return out


def gnvp(spec: NetworkSpec, params: ParamVector, x, v) -> np.ndarray:
    """Generalized Gauss-Newton matrix of the batch-mean loss times ``v``.

    Computes ``(1/n) sum_i J_i^T H_f,i J_i v``: one directional forward
    pass for ``J v``, then a single backward pass. Labels are not needed.
    """
    check_params(spec, params)
    xb, _ = _as_batch(spec, x)
    if xb.shape[0] == 0:
        raise ValueError("empty batch")
    direction = _check_direction(spec, params, v)
    logits, rlogits, inputs, _, preacts = _r_forward(spec, params, direction, xb)
    seeds = _softmax_hessian_apply(softmax(logits), rlogits) / xb.shape[0]
    return _sum_grad(params, inputs, backprop_deltas(spec, params, inputs, preacts, seeds))
