"""Fused CPU kernels for the selective scan hot path.

The discretize + inject + scan + readout chain is the dominant cost of
training; composing it from whole-array numpy ops makes ~12 memory passes
over (B, L, channels, states)-sized buffers. The kernels here do it in one
pass per direction, parallelized over the batch axis. Results are
deterministic for a fixed thread count: no cross-thread reductions are
performed (per-batch partials are summed by the caller in index order).

Scratch layout is (B, L, N, d) so the per-step state block is written
and read as one contiguous run.

This module also owns process-level tuning: on a small CPU the jit worker
pool and the BLAS pool must not spin against each other, so BLAS is pinned
to one thread and the OpenMP workers sleep when idle.
"""

from __future__ import annotations

import ctypes
import os
import warnings

import numpy as np

# Serve large allocations from the heap and keep freed blocks mapped; the
# training loop otherwise spends a large fraction of its time in page faults.
try:
    _libc = ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
except OSError:  # non-glibc platform
    pass

os.environ.setdefault("OMP_WAIT_POLICY", "PASSIVE")

try:
    from threadpoolctl import threadpool_limits

    _blas_limiter = threadpool_limits(limits=1, user_api="blas")
except Exception:  # threadpoolctl missing or no BLAS found
    _blas_limiter = None

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from numba import config as _numba_config
    from numba import njit, prange

_numba_config.THREADING_LAYER = "omp"


@njit(parallel=True, fastmath=True, cache=True)
def _scan_fwd(A, delta, Bt, Ct, x, D, hs, y):
    # A (N,d); delta,x,y (B,L,d); Bt,Ct (B,L,N); hs (B,L,N,d); D (d,)
    Bn, Ln, dn = delta.shape
    Nn = A.shape[0]
    for b in prange(Bn):
        carry = np.zeros((Nn, dn), dtype=delta.dtype)
        for l in range(Ln):
            for dd in range(dn):
                y[b, l, dd] = D[dd] * x[b, l, dd]
            for n in range(Nn):
                bt = Bt[b, l, n]
                ct = Ct[b, l, n]
                for dd in range(dn):
                    dt = delta[b, l, dd]
                    zz = dt * A[n, dd]
                    em = np.expm1(zz)
                    ab = em + 1.0
                    if abs(zz) < 1e-4:
                        ratio = 1.0 + zz * (0.5 + zz * (1.0 / 6.0))
                    else:
                        ratio = em / zz
                    h = ab * carry[n, dd] + ratio * dt * bt * x[b, l, dd]
                    carry[n, dd] = h
                    hs[b, l, n, dd] = h
                    y[b, l, dd] += ct * h


@njit(parallel=True, fastmath=True, cache=True)
def _scan_bwd(A, delta, Bt, Ct, x, D, hs, gy, gA_part, gdelta, gBt, gCt, gx, gD_part):
    Bn, Ln, dn = delta.shape
    Nn = A.shape[0]
    for b in prange(Bn):
        carry = np.zeros((Nn, dn), dtype=delta.dtype)
        for l in range(Ln - 1, -1, -1):
            for dd in range(dn):
                g = gy[b, l, dd]
                gx[b, l, dd] = g * D[dd]
                gD_part[b, dd] += g * x[b, l, dd]
                gdelta[b, l, dd] = 0.0
            for n in range(Nn):
                bt = Bt[b, l, n]
                ct = Ct[b, l, n]
                gct = 0.0
                gbt = 0.0
                for dd in range(dn):
                    g = gy[b, l, dd]
                    gct += g * hs[b, l, n, dd]
                    gh = ct * g + carry[n, dd]
                    hp = hs[b, l - 1, n, dd] if l > 0 else 0.0
                    dt = delta[b, l, dd]
                    xv = x[b, l, dd]
                    zz = dt * A[n, dd]
                    em = np.expm1(zz)
                    ab = em + 1.0
                    if abs(zz) < 1e-4:
                        ratio = 1.0 + zz * (0.5 + zz * (1.0 / 6.0))
                        dratio = 0.5 + zz * (1.0 / 3.0)
                    else:
                        ratio = em / zz
                        dratio = (ab * zz - em) / (zz * zz)
                    gz = gh * hp * ab + gh * dt * bt * xv * dratio
                    gA_part[b, n, dd] += gz * dt
                    gdelta[b, l, dd] += gz * A[n, dd] + gh * ratio * bt * xv
                    gbt += gh * ratio * dt * xv
                    gx[b, l, dd] += gh * ratio * dt * bt
                    carry[n, dd] = gh * ab
                gCt[b, l, n] = gct
                gBt[b, l, n] = gbt


def fused_scan_forward(A, delta, Bt, Ct, x, D, workspace: dict | None = None, alloc=np.empty):
    """Run the fused forward; returns (y, hs) with hs as scratch for backward.

    ``A`` is (d, N) as stored on the parameter; the kernels index its
    transpose so each scan chain walks contiguous memory. ``workspace``
    (when given) recycles the large state buffer across calls; the caller
    must guarantee at most one in-flight tape per workspace, since a new
    forward overwrites the states the previous backward would read.
    """
    Bn, Ln, dn = delta.shape
    At = np.ascontiguousarray(A.T)
    shape = (Bn, Ln, At.shape[0], dn)
    if workspace is None:
        hs = alloc(shape, delta.dtype)
    else:
        hs = workspace.setdefault(("hs", shape, delta.dtype.str), np.empty(shape, dtype=delta.dtype))
    y = alloc(x.shape, x.dtype)
    _scan_fwd(At, delta, Bt, Ct, x, D, hs, y)
    return y, hs


def fused_scan_backward(A, delta, Bt, Ct, x, D, hs, gy, alloc=np.empty):
    """Gradients of the fused forward w.r.t. (A, delta, Bt, Ct, x, D)."""
    Bn, Ln, dn = delta.shape
    At = np.ascontiguousarray(A.T)
    gA_part = alloc((Bn, At.shape[0], dn), delta.dtype)
    gA_part.fill(0)
    gD_part = alloc((Bn, dn), delta.dtype)
    gD_part.fill(0)
    gdelta = alloc(delta.shape, delta.dtype)
    gBt = alloc(Bt.shape, Bt.dtype)
    gCt = alloc(Ct.shape, Ct.dtype)
    gx = alloc(x.shape, x.dtype)
    _scan_bwd(At, delta, Bt, Ct, x, D, hs, gy, gA_part, gdelta, gBt, gCt, gx, gD_part)
    # deterministic reduction order over the batch axis
    return np.ascontiguousarray(gA_part.sum(axis=0).T), gdelta, gBt, gCt, gx, gD_part.sum(axis=0)


# ---------------------------------------------------------------------------
# Fused elementwise helpers (arithmetic only; transcendentals stay in numpy,
# whose SIMD loops are far faster than scalar libm calls from jitted code)
# ---------------------------------------------------------------------------


@njit(parallel=True, fastmath=True, cache=True)
def _silu_fwd(x, t, out):
    # t holds tanh(x/2) on entry and sigmoid(x) on exit
    xf = x.reshape(-1)
    tf = t.reshape(-1)
    of = out.reshape(-1)
    for i in prange(xf.size):
        s = 0.5 * (tf[i] + 1.0)
        tf[i] = s
        of[i] = xf[i] * s


@njit(parallel=True, fastmath=True, cache=True)
def _silu_bwd(g, x, sig, out):
    gf = g.reshape(-1)
    xf = x.reshape(-1)
    sf = sig.reshape(-1)
    of = out.reshape(-1)
    for i in prange(gf.size):
        s = sf[i]
        of[i] = gf[i] * s * (1.0 + xf[i] * (1.0 - s))


@njit(parallel=True, fastmath=True, cache=True)
def _rmsnorm_fwd(x2d, eps, out2d, inv):
    rows, c = x2d.shape
    for r in prange(rows):
        ms = 0.0
        for j in range(c):
            v = x2d[r, j]
            ms += v * v
        iv = 1.0 / np.sqrt(ms / c + eps)
        inv[r] = iv
        for j in range(c):
            out2d[r, j] = x2d[r, j] * iv


@njit(parallel=True, fastmath=True, cache=True)
def _rmsnorm_bwd(g2d, x2d, inv, out2d):
    rows, c = g2d.shape
    for r in prange(rows):
        dot = 0.0
        for j in range(c):
            dot += g2d[r, j] * x2d[r, j]
        iv = inv[r]
        k = iv * iv * iv * (dot / c)
        for j in range(c):
            out2d[r, j] = g2d[r, j] * iv - x2d[r, j] * k


@njit(parallel=True, fastmath=True, cache=True)
def _conv1d_fwd(x, w, bias, out):
    # x/out (B,L,C); w (K,C); left zero padding of K-1
    Bn, Ln, Cn = x.shape
    K = w.shape[0]
    for b in prange(Bn):
        for l in range(Ln):
            for c in range(Cn):
                acc = bias[c]
                for k in range(K):
                    j = l - (K - 1) + k
                    if j >= 0:
                        acc += w[k, c] * x[b, j, c]
                out[b, l, c] = acc


@njit(parallel=True, fastmath=True, cache=True)
def _conv1d_bwd(g, x, w, gx, gw_part, gb_part):
    Bn, Ln, Cn = x.shape
    K = w.shape[0]
    for b in prange(Bn):
        for l in range(Ln):
            for c in range(Cn):
                acc = 0.0
                for k in range(K):
                    j = l + (K - 1) - k
                    if j < Ln:
                        acc += w[k, c] * g[b, j, c]
                gx[b, l, c] = acc
        for l in range(Ln):
            for c in range(Cn):
                gv = g[b, l, c]
                gb_part[b, c] += gv
                for k in range(K):
                    j = l - (K - 1) + k
                    if j >= 0:
                        gw_part[b, k, c] += gv * x[b, j, c]
