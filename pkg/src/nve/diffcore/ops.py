"""Differentiable operations recorded on a tape.

All convolutions use cross-correlation semantics (no kernel flip) with zero
padding.  Shapes follow the [batch, feature, spatial...] convention.  Each
operation validates its preconditions with ValueError and produces finite
outputs (FloatingPointError otherwise, see :func:`core.set_check_finite`).
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .core import DiffArray, _accumulate, tape_of

# Upper bound on im2col buffer elements before conv2d falls back to chunking
# along the output width axis.
_COL_CHUNK_ELEMS = 16_000_000

# Kernel span (extent * dilation) above which single-axis kernels use the
# dense structured-matmul path instead of im2col.
_DENSE_COL_MIN_SPAN = 8


def _as_diff(x) -> tuple[DiffArray | None, np.ndarray]:
    """Return (diff_or_None, values). Non-DiffArray inputs are constants."""
    if isinstance(x, DiffArray):
        return x, x.values
    return None, np.asarray(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> DiffArray:
    da, va = _as_diff(a)
    db, vb = _as_diff(b)
    tape = tape_of(*(d for d in (da, db) if d is not None))
    out = DiffArray(va + vb, tape)
    if tape is not None:
        def bwd(g, adjoints):
            if da is not None:
                _accumulate(adjoints, da.node_id, _unbroadcast(g, va.shape))
            if db is not None:
                _accumulate(adjoints, db.node_id, _unbroadcast(g, vb.shape))
        tape.record(out.node_id, bwd)
    return out


def sub(a, b) -> DiffArray:
    da, va = _as_diff(a)
    db, vb = _as_diff(b)
    tape = tape_of(*(d for d in (da, db) if d is not None))
    out = DiffArray(va - vb, tape)
    if tape is not None:
        def bwd(g, adjoints):
            if da is not None:
                _accumulate(adjoints, da.node_id, _unbroadcast(g, va.shape))
            if db is not None:
                _accumulate(adjoints, db.node_id, _unbroadcast(-g, vb.shape))
        tape.record(out.node_id, bwd)
    return out


def mul(a, b) -> DiffArray:
    da, va = _as_diff(a)
    db, vb = _as_diff(b)
    tape = tape_of(*(d for d in (da, db) if d is not None))
    out = DiffArray(va * vb, tape)
    if tape is not None:
        def bwd(g, adjoints):
            if da is not None:
                _accumulate(adjoints, da.node_id, _unbroadcast(g * vb, va.shape))
            if db is not None:
                _accumulate(adjoints, db.node_id, _unbroadcast(g * va, vb.shape))
        tape.record(out.node_id, bwd)
    return out


def relu(x: DiffArray) -> DiffArray:
    out = DiffArray(np.maximum(x.values, 0), x.tape)
    if x.tape is not None:
        mask = x.values > 0

        def bwd(g, adjoints):
            _accumulate(adjoints, x.node_id, g * mask)
        x.tape.record(out.node_id, bwd)
    return out


def reshape(x: DiffArray, shape) -> DiffArray:
    out = DiffArray(x.values.reshape(shape), x.tape)
    if x.tape is not None:
        orig = x.values.shape

        def bwd(g, adjoints):
            _accumulate(adjoints, x.node_id, g.reshape(orig))
        x.tape.record(out.node_id, bwd)
    return out


def concat(arrays, axis: int = 0) -> DiffArray:
    arrays = list(arrays)
    if not arrays:
        raise ValueError("concat of an empty sequence")
    tape = tape_of(*arrays)
    out = DiffArray(np.concatenate([a.values for a in arrays], axis=axis), tape)
    if tape is not None:
        sizes = [a.values.shape[axis] for a in arrays]
        bounds = np.cumsum([0] + sizes)

        def bwd(g, adjoints):
            for a, lo, hi in zip(arrays, bounds[:-1], bounds[1:]):
                if a.tape is not None or True:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    _accumulate(adjoints, a.node_id, g[tuple(sl)])
        tape.record(out.node_id, bwd)
    return out


def _reduce_axes(x: np.ndarray, axis) -> tuple:
    if axis is None:
        return tuple(range(x.ndim))
    if isinstance(axis, int):
        return (axis % x.ndim,)
    return tuple(a % x.ndim for a in axis)


def mean(x: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    axes = _reduce_axes(x.values, axis)
    out = DiffArray(x.values.mean(axis=axes, keepdims=keepdims), x.tape)
    if x.tape is not None:
        count = 1
        for a in axes:
            count *= x.values.shape[a]
        shape = x.values.shape

        def bwd(g, adjoints):
            gexp = g
            if not keepdims:
                for a in sorted(axes):
                    gexp = np.expand_dims(gexp, a)
            _accumulate(adjoints, x.node_id,
                        np.broadcast_to(gexp, shape).astype(g.dtype) / count)
        x.tape.record(out.node_id, bwd)
    return out


def sum(x: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:  # noqa: A001
    axes = _reduce_axes(x.values, axis)
    out = DiffArray(x.values.sum(axis=axes, keepdims=keepdims), x.tape)
    if x.tape is not None:
        shape = x.values.shape

        def bwd(g, adjoints):
            gexp = g
            if not keepdims:
                for a in sorted(axes):
                    gexp = np.expand_dims(gexp, a)
            _accumulate(adjoints, x.node_id,
                        np.broadcast_to(gexp, shape).astype(g.dtype).copy())
        x.tape.record(out.node_id, bwd)
    return out


def linear(x: DiffArray, w: DiffArray, b: DiffArray | None = None) -> DiffArray:
    """x[B,N] @ w[M,N]^T + b[M] -> [B,M]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch: x{x.shape} w{w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"linear bias shape {b.shape} != ({w.shape[0]},)")
    vals = x.values @ w.values.T
    if b is not None:
        vals = vals + b.values
    tape = tape_of(*( [x, w] + ([b] if b is not None else []) ))
    out = DiffArray(vals, tape)
    if tape is not None:
        def bwd(g, adjoints):
            _accumulate(adjoints, x.node_id, g @ w.values)
            _accumulate(adjoints, w.node_id, g.T @ x.values)
            if b is not None:
                _accumulate(adjoints, b.node_id, g.sum(axis=0))
        tape.record(out.node_id, bwd)
    return out


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _conv_out_len(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv1d(x: DiffArray, k: DiffArray, bias: DiffArray | None = None,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> DiffArray:
    """Cross-correlation of x[B,Cin,L] with k[Cout,Cin,K] -> [B,Cout,Lout]."""
    if x.ndim != 3 or k.ndim != 3:
        raise ValueError(f"conv1d expects 3-d operands, got x{x.shape} k{k.shape}")
    B, cin, L = x.shape
    cout, cin_k, K = k.shape
    if cin != cin_k:
        raise ValueError(f"conv1d channel mismatch: x has {cin}, kernel expects {cin_k}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv1d bias shape {bias.shape} != ({cout},)")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv1d requires stride >= 1, dilation >= 1, padding >= 0")
    lout = _conv_out_len(L, K, stride, dilation, padding)
    if lout < 1:
        raise ValueError(f"conv1d output length {lout} < 1")

    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding))) if padding else x.values
    cols = np.empty((B, cin, K, lout), dtype=x.dtype)
    for j in range(K):
        start = j * dilation
        cols[:, :, j, :] = xp[:, :, start:start + (lout - 1) * stride + 1:stride]
    cols2 = cols.reshape(B, cin * K, lout)
    w2 = k.values.reshape(cout, cin * K)
    vals = np.matmul(w2, cols2)
    if bias is not None:
        vals = vals + bias.values[:, None]

    tape = tape_of(*( [x, k] + ([bias] if bias is not None else []) ))
    out = DiffArray(vals, tape)
    if tape is not None:
        def bwd(g, adjoints):
            dw2 = np.tensordot(g, cols2, axes=([0, 2], [0, 2]))
            _accumulate(adjoints, k.node_id, dw2.reshape(k.shape))
            if bias is not None:
                _accumulate(adjoints, bias.node_id, g.sum(axis=(0, 2)))
            dcols = np.matmul(w2.T, g).reshape(B, cin, K, lout)
            dxp = np.zeros((B, cin, L + 2 * padding), dtype=g.dtype)
            for j in range(K):
                start = j * dilation
                dxp[:, :, start:start + (lout - 1) * stride + 1:stride] += dcols[:, :, j, :]
            dx = dxp[:, :, padding:padding + L] if padding else dxp
            _accumulate(adjoints, x.node_id, dx)
        tape.record(out.node_id, bwd)
    return out


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _conv2d_column(x: DiffArray, k: DiffArray, bias: DiffArray | None,
                   stride_hw, padding_hw, dil_h: int, transposed: bool) -> DiffArray:
    """Single-axis kernel convolution as one dense GEMM per batch item.

    Canonical orientation has the kernel along axis 2; ``transposed`` swaps
    the spatial axes of inputs/outputs so row kernels reuse the same code.
    The kernel is scattered into a dense [Cout*Hout, Cin*Hpadded] matrix,
    which multiplies the padded input reshaped to [Cin*Hpadded, Wout].
    """
    xv, kv = x.values, k.values
    if transposed:
        xv = np.ascontiguousarray(xv.transpose(0, 1, 3, 2))
        kv = np.ascontiguousarray(kv.transpose(0, 1, 3, 2))
    B, cin, H, W = xv.shape
    cout, _, kh, _ = kv.shape
    sh, sw = stride_hw
    ph, pw = padding_hw
    hout = _conv_out_len(H, kh, sh, dil_h, ph)
    wout = _conv_out_len(W, 1, sw, 1, pw)
    if ph or pw:
        xp = np.pad(xv, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        xp = xv
    hp, wp = H + 2 * ph, W + 2 * pw

    col_select = not (sw == 1 and wout == wp)
    cols = np.arange(wout) * sw
    xs = xp[:, :, :, cols] if col_select else xp
    x2 = xs.reshape(B, cin * hp, wout)

    ho = np.arange(hout)
    w4 = np.zeros((cout, hout, cin, hp), dtype=xv.dtype)
    for i in range(kh):
        rows = ho * sh + i * dil_h
        w4[:, ho, :, rows] = np.broadcast_to(kv[:, :, i, 0], (hout, cout, cin))
    w2 = w4.reshape(cout * hout, cin * hp)

    vals = np.matmul(w2, x2).reshape(B, cout, hout, wout)
    if transposed:
        vals = np.ascontiguousarray(vals.transpose(0, 1, 3, 2))
    if bias is not None:
        vals += bias.values[:, None, None]

    tape = tape_of(*( [x, k] + ([bias] if bias is not None else []) ))
    out = DiffArray(vals, tape)
    if tape is not None:
        def bwd(g, adjoints):
            gc = np.ascontiguousarray(g.transpose(0, 1, 3, 2)) if transposed else g
            g2 = gc.reshape(B, cout * hout, wout)
            dw4 = np.tensordot(g2, x2, axes=([0, 2], [0, 2])).reshape(
                cout, hout, cin, hp)
            dk = np.empty_like(kv)
            for i in range(kh):
                rows = ho * sh + i * dil_h
                dk[:, :, i, 0] = dw4[:, ho, :, rows].sum(axis=0)
            if transposed:
                dk = dk.transpose(0, 1, 3, 2)
            _accumulate(adjoints, k.node_id, np.ascontiguousarray(dk))
            if bias is not None:
                _accumulate(adjoints, bias.node_id, g.sum(axis=(0, 2, 3)))

            dxs = np.matmul(w2.T, g2).reshape(B, cin, hp, wout)
            if col_select:
                dxp = np.zeros((B, cin, hp, wp), dtype=g.dtype)
                dxp[:, :, :, cols] = dxs
            else:
                dxp = dxs
            dxv = dxp[:, :, ph:ph + H, pw:pw + W] if (ph or pw) else dxp
            if transposed:
                dxv = np.ascontiguousarray(dxv.transpose(0, 1, 3, 2))
            _accumulate(adjoints, x.node_id, dxv)
        tape.record(out.node_id, bwd)
    return out


@njit(cache=True)
def _gather_windows(xp, kh, kw, sh, sw, dh, dw, w0, buf):  # pragma: no cover
    B, cin, _, _ = xp.shape
    hout, wlen = buf.shape[4], buf.shape[5]
    for b in range(B):
        for c in range(cin):
            plane = xp[b, c]
            for i in range(kh):
                for j in range(kw):
                    dst = buf[b, c, i, j]
                    coff = j * dw + w0 * sw
                    for y in range(hout):
                        row = plane[y * sh + i * dh]
                        for x in range(wlen):
                            dst[y, x] = row[coff + x * sw]


@njit(cache=True)
def _scatter_windows(dxp, kh, kw, sh, sw, dh, dw, w0, dcols):  # pragma: no cover
    B, cin, _, _ = dxp.shape
    hout, wlen = dcols.shape[4], dcols.shape[5]
    for b in range(B):
        for c in range(cin):
            plane = dxp[b, c]
            for i in range(kh):
                for j in range(kw):
                    src = dcols[b, c, i, j]
                    coff = j * dw + w0 * sw
                    for y in range(hout):
                        row = plane[y * sh + i * dh]
                        for x in range(wlen):
                            row[coff + x * sw] += src[y, x]


def _im2col_2d(xp, kh, kw, sh, sw, dh, dw, hout, w0, wlen):
    """Gather [B,Cin,Kh,Kw,Hout,wlen] windows for output columns w0..w0+wlen."""
    B, cin = xp.shape[:2]
    buf = np.empty((B, cin, kh, kw, hout, wlen), dtype=xp.dtype)
    _gather_windows(xp, kh, kw, sh, sw, dh, dw, w0, buf)
    return buf


def conv2d(x: DiffArray, k: DiffArray, bias: DiffArray | None = None,
           stride=(1, 1), padding=(0, 0), dilation=(1, 1)) -> DiffArray:
    """Cross-correlation of x[B,Cin,H,W] with k[Cout,Cin,Kh,Kw] -> [B,Cout,Hout,Wout].

    Column kernels (Kw == 1) with a long vertical extent dispatch to a dense
    structured-matmul path (one GEMM over the full padded height); row
    kernels (Kh == 1) reuse it through an axis swap.  Semantics are identical
    across paths.
    """
    if x.ndim != 4 or k.ndim != 4:
        raise ValueError(f"conv2d expects 4-d operands, got x{x.shape} k{k.shape}")
    B, cin, H, W = x.shape
    cout, cin_k, kh, kw = k.shape
    if cin != cin_k:
        raise ValueError(f"conv2d channel mismatch: x has {cin}, kernel expects {cin_k}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({cout},)")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    if min(sh, sw) < 1 or min(dh, dw) < 1 or min(ph, pw) < 0:
        raise ValueError("conv2d requires stride >= 1, dilation >= 1, padding >= 0")
    hout = _conv_out_len(H, kh, sh, dh, ph)
    wout = _conv_out_len(W, kw, sw, dw, pw)
    if hout < 1 or wout < 1:
        raise ValueError(f"conv2d output extent ({hout}, {wout}) < 1")

    if kw == 1 and dw == 1 and kh * dh >= _DENSE_COL_MIN_SPAN:
        return _conv2d_column(x, k, bias, (sh, sw), (ph, pw), dh,
                              transposed=False)
    if kh == 1 and dh == 1 and kw * dw >= _DENSE_COL_MIN_SPAN:
        return _conv2d_column(x, k, bias, (sw, sh), (pw, ph), dw,
                              transposed=True)

    if ph or pw:
        xp = np.pad(x.values, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        xp = x.values
    w2 = k.values.reshape(cout, cin * kh * kw)

    chunk = max(1, min(wout, _COL_CHUNK_ELEMS // max(1, B * cin * kh * kw * hout)))
    vals = np.empty((B, cout, hout, wout), dtype=x.dtype)
    for w0 in range(0, wout, chunk):
        wlen = min(chunk, wout - w0)
        cols = _im2col_2d(xp, kh, kw, sh, sw, dh, dw, hout, w0, wlen)
        cols = cols.reshape(B, cin * kh * kw, hout * wlen)
        vals[:, :, :, w0:w0 + wlen] = np.matmul(w2, cols).reshape(B, cout, hout, wlen)
    if bias is not None:
        vals += bias.values[:, None, None]

    tape = tape_of(*( [x, k] + ([bias] if bias is not None else []) ))
    out = DiffArray(vals, tape)
    if tape is not None:
        def bwd(g, adjoints):
            dw2 = np.zeros_like(w2)
            dxp = np.zeros_like(xp)
            for w0 in range(0, wout, chunk):
                wlen = min(chunk, wout - w0)
                cols = _im2col_2d(xp, kh, kw, sh, sw, dh, dw, hout, w0, wlen)
                cols = cols.reshape(B, cin * kh * kw, hout * wlen)
                gc = np.ascontiguousarray(g[:, :, :, w0:w0 + wlen])
                gc = gc.reshape(B, cout, hout * wlen)
                # batched GEMMs with stride-level transposes (no copies)
                dw2 += np.matmul(gc, cols.transpose(0, 2, 1)).sum(axis=0)
                dcols = np.matmul(w2.T, gc).reshape(B, cin, kh, kw, hout, wlen)
                _scatter_windows(dxp, kh, kw, sh, sw, dh, dw, w0,
                                 np.ascontiguousarray(dcols))
            _accumulate(adjoints, k.node_id, dw2.reshape(k.shape))
            if bias is not None:
                _accumulate(adjoints, bias.node_id, g.sum(axis=(0, 2, 3)))
            dx = dxp[:, :, ph:ph + H, pw:pw + W] if (ph or pw) else dxp
            _accumulate(adjoints, x.node_id, dx)
        tape.record(out.node_id, bwd)
    return out


# ---------------------------------------------------------------------------
# normalization / loss
# ---------------------------------------------------------------------------

def batch_norm(x: DiffArray, gamma: DiffArray, beta: DiffArray,
               running_mean: np.ndarray, running_var: np.ndarray,
               eps: float = 1e-5, mode: str = "train",
               momentum: float = 0.1) -> DiffArray:
    """Normalize over all axes except the feature axis (axis 1).

    Train mode uses batch statistics (population variance) and updates the
    running buffers in place with ``running <- (1-momentum)*running +
    momentum*batch``.  Eval mode normalizes by the running statistics.
    """
    if x.ndim < 2:
        raise ValueError("batch_norm expects at least 2-d input")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    if eps <= 0:
        raise ValueError("batch_norm eps must be > 0")
    nfeat = x.shape[1]
    if gamma.shape != (nfeat,) or beta.shape != (nfeat,):
        raise ValueError("batch_norm gamma/beta must match the feature axis")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, nfeat) + (1,) * (x.ndim - 2)

    if mode == "train":
        if x.shape[0] == 1:
            raise ValueError("batch_norm train mode requires batch size > 1")
        mu = x.values.mean(axis=axes)
        var = x.values.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu.reshape(bshape)) * inv_std.reshape(bshape)
    vals = gamma.values.reshape(bshape) * xhat + beta.values.reshape(bshape)
    tape = tape_of(x, gamma, beta)
    out = DiffArray(vals, tape)
    if tape is not None:
        count = 1
        for a in axes:
            count *= x.shape[a]

        def bwd(g, adjoints):
            _accumulate(adjoints, gamma.node_id, (g * xhat).sum(axis=axes))
            _accumulate(adjoints, beta.node_id, g.sum(axis=axes))
            dxhat = g * gamma.values.reshape(bshape)
            if mode == "train":
                m1 = dxhat.sum(axis=axes, keepdims=True) / count
                m2 = (dxhat * xhat).sum(axis=axes, keepdims=True) / count
                dx = (dxhat - m1 - xhat * m2) * inv_std.reshape(bshape)
            else:
                dx = dxhat * inv_std.reshape(bshape)
            _accumulate(adjoints, x.node_id, dx)
        tape.record(out.node_id, bwd)
    return out


def softmax_cross_entropy(logits: DiffArray, labels) -> DiffArray:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects [B,K] logits, got {logits.shape}")
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} != ({B},)")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels out of range [0, {K})")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    out = DiffArray(np.asarray(loss, dtype=logits.dtype), logits.tape)
    if logits.tape is not None:
        softmax = np.exp(logp)

        def bwd(g, adjoints):
            d = softmax.copy()
            d[rows, labels] -= 1.0
            _accumulate(adjoints, logits.node_id, d * (g / B))
        logits.tape.record(out.node_id, bwd)
    return out


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    """Plain-numpy stabilized log-softmax along the last axis (eval helper)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_values(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_values(logits))
