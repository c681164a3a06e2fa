"""Differentiable image-layer primitives on NCHW tensors."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, add, make_result, matmul, transpose


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv_output_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col.

    x is ``[B, Cin, H, W]``, weight ``[Cout, Cin, KH, KW]``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Ci, KH, KW = weight.shape
    if C != Ci:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Ci} (shapes {x.shape}, {weight.shape})")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Ho, Wo = conv_output_size(H, KH, sh, ph), conv_output_size(W, KW, sw, pw)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {Ho}x{Wo} for input {H}x{W}, kernel {KH}x{KW}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    win = sliding_window_view(xp, (KH, KW), axis=(2, 3))[:, :, : sh * (Ho - 1) + 1 : sh, : sw * (Wo - 1) + 1 : sw]
    # rows of receptive fields laid out (B, Ho, Wo, KH, KW, C)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 5, 1)).reshape(B * Ho * Wo, KH * KW * C)
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(O, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(O, KH, KW, C).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad and (sh, sw) == (1, 1) and ph < KH and pw < KW:
            # stride 1: the input gradient is a correlation of g with the flipped kernel
            qh, qw = KH - 1 - ph, KW - 1 - pw
            gwin = sliding_window_view(np.pad(g, ((0, 0), (0, 0), (qh, qh), (qw, qw))), (KH, KW), axis=(2, 3))
            gcols = np.ascontiguousarray(gwin.transpose(0, 2, 3, 4, 5, 1)).reshape(B * H * W, KH * KW * O)
            wf = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(KH * KW * O, C)
            gx = (gcols @ wf).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        elif x.requires_grad:
            dcols = (g2 @ w2).reshape(B, Ho, Wo, KH, KW, C)
            dxp = np.zeros((B, xp.shape[2], xp.shape[3], C), dtype=xp.dtype)
            for i in range(KH):
                for j in range(KW):
                    dxp[:, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw] += dcols[:, :, :, i, j]
            gx = dxp[:, ph : ph + H, pw : pw + W].transpose(0, 3, 1, 2)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, inputs, bw, "conv2d")


def max_pool2d(x: Tensor, kernel_size: int = 2, stride: int | None = None) -> Tensor:
    """Window maximum with floor semantics; ties route gradient to the first element."""
    k = kernel_size
    s = k if stride is None else stride
    B, C, H, W = x.shape
    if H < k or W < k:
        raise ShapeError(f"max_pool2d: input {H}x{W} smaller than kernel {k}x{k}")
    Ho, Wo = (H - k) // s + 1, (W - k) // s + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, : s * (Ho - 1) + 1 : s, : s * (Wo - 1) + 1 : s]
    flat = win.reshape(B, C, Ho, Wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                sel = idx == i * k + j
                gx[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += np.where(sel, g, 0)
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), bw, "max_pool2d")


def adaptive_windows(n: int, out: int) -> list[tuple[int, int]]:
    """Window bounds ``[floor(i*n/out), ceil((i+1)*n/out))`` for each output cell."""
    return [((i * n) // out, -((-(i + 1) * n) // out)) for i in range(out)]


def adaptive_avg_pool2d(x: Tensor, output_size=3) -> Tensor:
    oh, ow = _pair(output_size)
    B, C, H, W = x.shape
    if H < oh or W < ow:
        raise ShapeError(f"adaptive_avg_pool2d: input {H}x{W} smaller than target grid {oh}x{ow}")
    rows, cols = adaptive_windows(H, oh), adaptive_windows(W, ow)
    out = np.empty((B, C, oh, ow), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / area)[:, :, None, None]
        return (gx,)

    return make_result(out, (x,), bw, "adaptive_avg_pool2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x ``[B, F]`` and weight ``[O, F]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    y = matmul(x, transpose(weight))
    return add(y, bias) if bias is not None else y


def he_std(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)


# rows of the N x N map handled at once; keeps each block cache-resident
_ATTN_BLOCK_ELEMS = 1 << 16


def spatial_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Attend every position to every position.

    q, k are ``[B, D, N]``, v is ``[B, C, N]``. Returns ``o`` of shape
    ``[B, C, N]`` with ``o[:, :, i] = sum_j A[i, j] v[:, :, j]`` where
    ``A[i] = softmax_j(q[:, :, i] . k[:, :, j])``. The map is built and
    consumed in row blocks so each softmax pass stays in cache.
    """
    if q.ndim != 3 or q.shape != k.shape or v.ndim != 3 or v.shape[::2] != q.shape[::2]:
        raise ShapeError(f"spatial_attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    B, _, N = q.shape
    blk = max(1, _ATTN_BLOCK_ELEMS // N)
    qd, kd, vd = q.data, k.data, v.data
    qt = np.swapaxes(qd, 1, 2)
    dtype = np.result_type(qd, kd, vd)
    attn = np.empty((B, N, N), dtype=dtype)
    out = np.empty((B, vd.shape[1], N), dtype=dtype)
    for b in range(B):
        for i0 in range(0, N, blk):
            e = attn[b, i0 : i0 + blk]
            np.matmul(qt[b, i0 : i0 + blk], kd[b], out=e)
            e -= e.max(axis=1, keepdims=True)
            np.exp(e, out=e)
            e *= 1.0 / e.sum(axis=1, keepdims=True)
            out[b, :, i0 : i0 + blk] = vd[b] @ e.T

    def bw(g):
        gq = np.empty_like(qd) if q.requires_grad else None
        gk = np.zeros_like(kd) if k.requires_grad else None
        gv = np.zeros_like(vd) if v.requires_grad else None
        need_energy = q.requires_grad or k.requires_grad
        # sum_j dL/dA_ij A_ij collapses to g_i . o_i
        rowdot = np.einsum("bcn,bcn->bn", g, out) if need_energy else None
        gt = np.swapaxes(g, 1, 2)
        for b in range(B):
            for i0 in range(0, N, blk):
                i1 = i0 + blk
                a = attn[b, i0:i1]
                if gv is not None:
                    gv[b] += g[b, :, i0:i1] @ a
                if not need_energy:
                    continue
                d = gt[b, i0:i1] @ vd[b]  # dL/dA for these rows
                d -= rowdot[b, i0:i1, None]
                d *= a  # now dL/d(energy)
                if gq is not None:
                    gq[b, :, i0:i1] = kd[b] @ d.T
                if gk is not None:
                    gk[b] += qd[b, :, i0:i1] @ d
        return gq, gk, gv

    result = make_result(out, (q, k, v), bw, "spatial_attention")
    result.attention = attn  # exposed for inspection; not part of the graph
    return result
