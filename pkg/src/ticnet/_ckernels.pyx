# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training kernels: fused batch loss/gradient and the momentum step.

Matrices are row-major; BLAS sees them as their column-major transposes.
"""

import numpy as np
from libc.math cimport exp, log
from scipy.linalg.cython_blas cimport dgemm


cdef inline void _gemm(char *ta, char *tb, int m, int n, int k, double *a, int lda,
                       double *b, int ldb, double beta, double *c, int ldc) noexcept nogil:
    cdef double one = 1.0
    dgemm(ta, tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)


def batch_loss_grad(double[::1] theta, int[::1] fan_in, int[::1] fan_out,
                    long[::1] w_off, long[::1] b_off, double[:, ::1] x,
                    long[::1] y, bint relu, bint skip, double[::1] grad):
    """Mean cross-entropy over the batch; writes its gradient into ``grad``."""
    cdef int n = x.shape[0]
    cdef int last = fan_in.shape[0] - 1
    cdef int l, k
    cdef Py_ssize_t i, j, size
    cdef double m, s, total = 0.0, inv_n = 1.0 / n
    cdef double[:, ::1] h = x
    cdef double[:, ::1] z
    cdef double[:, ::1] hn
    cdef double[:, ::1] dz
    cdef double[:, ::1] dh
    cdef double[:, ::1] up
    cdef double *zp
    cdef double *hp
    cdef double *src

    # acts[l] is the input to layer l, zs[l] its pre-activation
    acts = [x]
    zs = []
    for l in range(last + 1):
        z = np.empty((n, fan_out[l]))
        for i in range(n):
            for j in range(fan_out[l]):
                z[i, j] = theta[b_off[l] + j]
        _gemm(b"T", b"N", fan_out[l], n, fan_in[l], &theta[w_off[l]], fan_in[l],
              &h[0, 0], fan_in[l], 1.0, &z[0, 0], fan_out[l])
        zs.append(z)
        if l == last:
            break
        hn = np.empty((n, fan_out[l]))
        zp = &z[0, 0]
        hp = &hn[0, 0]
        src = &h[0, 0]
        size = n * fan_out[l]
        for i in range(size):
            if relu and zp[i] <= 0.0:
                hp[i] = 0.0
            else:
                hp[i] = zp[i]
        if skip and l > 0:
            for i in range(size):
                hp[i] += src[i]
        acts.append(hn)
        h = hn

    # softmax cross-entropy; the logits buffer becomes (p - onehot) / n
    dz = zs[last]
    k = fan_out[last]
    for i in range(n):
        m = dz[i, 0]
        for j in range(1, k):
            if dz[i, j] > m:
                m = dz[i, j]
        s = 0.0
        for j in range(k):
            dz[i, j] = exp(dz[i, j] - m)
            s += dz[i, j]
        total += log(s) - log(dz[i, y[i]])
        for j in range(k):
            dz[i, j] = dz[i, j] / s * inv_n
        dz[i, y[i]] -= inv_n

    for l in range(last, -1, -1):
        if l < last:
            # up holds the gradient w.r.t. hidden layer l's output
            if relu:
                dz = np.empty((n, fan_out[l]))
                z = zs[l]
                zp = &z[0, 0]
                src = &up[0, 0]
                hp = &dz[0, 0]
                size = n * fan_out[l]
                for i in range(size):
                    hp[i] = src[i] if zp[i] > 0.0 else 0.0
            else:
                dz = up
        h = acts[l]
        _gemm(b"N", b"T", fan_in[l], fan_out[l], n, &h[0, 0], fan_in[l],
              &dz[0, 0], fan_out[l], 0.0, &grad[w_off[l]], fan_in[l])
        for j in range(fan_out[l]):
            s = 0.0
            for i in range(n):
                s += dz[i, j]
            grad[b_off[l] + j] = s
        if l == 0:
            break
        dh = np.empty((n, fan_in[l]))
        if skip and 0 < l < last:
            dh[...] = up
            s = 1.0
        else:
            s = 0.0
        _gemm(b"N", b"N", fan_in[l], n, fan_out[l], &theta[w_off[l]], fan_in[l],
              &dz[0, 0], fan_out[l], s, &dh[0, 0], fan_in[l])
        up = dh
    return total * inv_n


def momentum_step(double[::1] theta, double[::1] velocity, double[::1] grad,
                  double eta, double weight_decay, double momentum):
    """v <- momentum*v - eta*(g + weight_decay*theta); theta <- theta + v."""
    cdef Py_ssize_t i
    with nogil:
        for i in range(theta.shape[0]):
            velocity[i] = momentum * velocity[i] - eta * (grad[i] + weight_decay * theta[i])
            theta[i] += velocity[i]
