"""Hot numeric kernels, each in a numba build and a pure-numpy build.

Three composites dominate runtime: 2-D convolution (image backbone),
the LSTM cell (one call per report token), and the additive attention
scorer (one call per token).  Each kernel ships as

* a vectorized numpy implementation (`*_np` suffix internally), and
* a plain-loop implementation compiled with ``@njit`` when numba is
  importable.

``IMPLS`` maps backend name to the kernel set; the module-level names
point at the backend chosen in :mod:`tienet.backend`.  The two builds
agree to ~1e-13 (different summation order), and each is deterministic
on its own.  ``benchmarks/bench_kernels.py`` times them side by side.
"""

import numpy as np

from .backend import ACTIVE_BACKEND, NUMBA_AVAILABLE, njit_if_available

# ---------------------------------------------------------------------------
# conv2d: x[H,W,Ci] * w[kh,kw,Ci,Co] + b[Co] -> y[Ho,Wo,Co]
# ---------------------------------------------------------------------------


def conv2d_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _conv2d_forward_np(x, w, b, stride, pad):
    kh, kw, _, co = w.shape
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    ho = (x.shape[0] - kh) // stride + 1
    wo = (x.shape[1] - kw) // stride + 1
    y = np.zeros((ho, wo, co), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = x[i : i + stride * ho : stride, j : j + stride * wo : stride]
            y += np.tensordot(patch, w[i, j], axes=([2], [0]))
    return y + b


def _conv2d_backward_np(x, w, dy, stride, pad):
    kh, kw, _, _ = w.shape
    h_in, w_in = x.shape[0], x.shape[1]
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    ho, wo = dy.shape[0], dy.shape[1]
    db = dy.sum(axis=(0, 1))
    dw = np.empty_like(w)
    dx_pad = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * ho, stride)
            cols = slice(j, j + stride * wo, stride)
            dw[i, j] = np.tensordot(x[rows, cols], dy, axes=([0, 1], [0, 1]))
            dx_pad[rows, cols] += np.tensordot(dy, w[i, j], axes=([2], [1]))
    dx = dx_pad[pad : pad + h_in, pad : pad + w_in] if pad else dx_pad
    return dx, dw, db


def _conv2d_forward_loops(x, w, b, stride, pad):
    h_in, w_in, ci = x.shape
    kh, kw, _, co = w.shape
    ho = (h_in + 2 * pad - kh) // stride + 1
    wo = (w_in + 2 * pad - kw) // stride + 1
    y = np.empty((ho, wo, co), x.dtype)
    for oy in range(ho):
        for ox in range(wo):
            for oc in range(co):
                acc = b[oc]
                for i in range(kh):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= h_in:
                        continue
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if ix < 0 or ix >= w_in:
                            continue
                        for c in range(ci):
                            acc += x[iy, ix, c] * w[i, j, c, oc]
                y[oy, ox, oc] = acc
    return y


def _conv2d_backward_loops(x, w, dy, stride, pad):
    h_in, w_in, ci = x.shape
    kh, kw, _, co = w.shape
    ho, wo = dy.shape[0], dy.shape[1]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(co, w.dtype)
    for oy in range(ho):
        for ox in range(wo):
            for oc in range(co):
                g = dy[oy, ox, oc]
                db[oc] += g
                for i in range(kh):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= h_in:
                        continue
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if ix < 0 or ix >= w_in:
                            continue
                        for c in range(ci):
                            dw[i, j, c, oc] += x[iy, ix, c] * g
                            dx[iy, ix, c] += w[i, j, c, oc] * g
    return dx, dw, db


# ---------------------------------------------------------------------------
# LSTM cell.  Gate layout along the 4h axis: input, forget, output, candidate.
# Forward returns (hc, gates, tanh_c): hc stacks [h_t ; c_t] so the caller can
# slice it, gates holds post-activation values for the backward pass.
# ---------------------------------------------------------------------------


def _lstm_cell_forward_np(w, u, b, x, h_prev, c_prev):
    h = h_prev.shape[0]
    pre = w @ x + u @ h_prev + b
    sig = 1.0 / (1.0 + np.exp(-pre[: 3 * h]))
    i, f, o = sig[:h], sig[h : 2 * h], sig[2 * h :]
    g = np.tanh(pre[3 * h :])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    hc = np.concatenate([o * tanh_c, c])
    gates = np.concatenate([sig, g])
    return hc, gates, tanh_c


def _lstm_cell_backward_np(w, u, x, h_prev, c_prev, gates, tanh_c, dh, dc):
    h = h_prev.shape[0]
    i, f, o, g = gates[:h], gates[h : 2 * h], gates[2 * h : 3 * h], gates[3 * h :]
    do = dh * tanh_c
    dct = dc + dh * o * (1.0 - tanh_c * tanh_c)
    dpre = np.concatenate(
        [
            dct * g * i * (1.0 - i),
            dct * c_prev * f * (1.0 - f),
            do * o * (1.0 - o),
            dct * i * (1.0 - g * g),
        ]
    )
    dw = np.outer(dpre, x)
    du = np.outer(dpre, h_prev)
    dx = w.T @ dpre
    dh_prev = u.T @ dpre
    dc_prev = dct * f
    return dw, du, dpre, dx, dh_prev, dc_prev


def _lstm_cell_forward_loops(w, u, b, x, h_prev, c_prev):
    h4, din = w.shape
    h = h4 // 4
    pre = np.empty(h4, w.dtype)
    for k in range(h4):
        acc = b[k]
        for j in range(din):
            acc += w[k, j] * x[j]
        for j in range(h):
            acc += u[k, j] * h_prev[j]
        pre[k] = acc
    gates = np.empty(h4, w.dtype)
    for k in range(3 * h):
        gates[k] = 1.0 / (1.0 + np.exp(-pre[k]))
    for k in range(3 * h, h4):
        gates[k] = np.tanh(pre[k])
    hc = np.empty(2 * h, w.dtype)
    tanh_c = np.empty(h, w.dtype)
    for k in range(h):
        c = gates[h + k] * c_prev[k] + gates[k] * gates[3 * h + k]
        tc = np.tanh(c)
        hc[k] = gates[2 * h + k] * tc
        hc[h + k] = c
        tanh_c[k] = tc
    return hc, gates, tanh_c


def _lstm_cell_backward_loops(w, u, x, h_prev, c_prev, gates, tanh_c, dh, dc):
    h4, din = w.shape
    h = h4 // 4
    dpre = np.empty(h4, w.dtype)
    dc_prev = np.empty(h, w.dtype)
    for k in range(h):
        i = gates[k]
        f = gates[h + k]
        o = gates[2 * h + k]
        g = gates[3 * h + k]
        tc = tanh_c[k]
        do = dh[k] * tc
        dct = dc[k] + dh[k] * o * (1.0 - tc * tc)
        dpre[k] = dct * g * i * (1.0 - i)
        dpre[h + k] = dct * c_prev[k] * f * (1.0 - f)
        dpre[2 * h + k] = do * o * (1.0 - o)
        dpre[3 * h + k] = dct * i * (1.0 - g * g)
        dc_prev[k] = dct * f
    dw = np.empty((h4, din), w.dtype)
    du = np.empty((h4, h), w.dtype)
    for k in range(h4):
        for j in range(din):
            dw[k, j] = dpre[k] * x[j]
        for j in range(h):
            du[k, j] = dpre[k] * h_prev[j]
    dx = np.zeros(din, w.dtype)
    dh_prev = np.zeros(h, w.dtype)
    for k in range(h4):
        for j in range(din):
            dx[j] += w[k, j] * dpre[k]
        for j in range(h):
            dh_prev[j] += u[k, j] * dpre[k]
    return dw, du, dpre, dx, dh_prev, dc_prev


# ---------------------------------------------------------------------------
# Additive attention scores: scores[j] = sum_k v[k] * tanh(xu[j,k] + u[k]).
# xu is the image-feature projection (precomputed once per image), u the
# projected recurrent state.  Forward also returns the tanh values for reuse
# in the backward pass.
# ---------------------------------------------------------------------------


def _attn_scores_forward_np(xu, u, v):
    t = np.tanh(xu + u)
    return t @ v, t


def _attn_scores_backward_np(ds, t, v):
    m = (1.0 - t * t) * ds[:, None]
    dxu = m * v
    du = dxu.sum(axis=0)
    dv = t.T @ ds
    return dxu, du, dv


def _attn_scores_forward_loops(xu, u, v):
    n, s = xu.shape
    scores = np.empty(n, xu.dtype)
    t = np.empty((n, s), xu.dtype)
    for j in range(n):
        acc = 0.0
        for k in range(s):
            tv = np.tanh(xu[j, k] + u[k])
            t[j, k] = tv
            acc += v[k] * tv
        scores[j] = acc
    return scores, t


def _attn_scores_backward_loops(ds, t, v):
    n, s = t.shape
    dxu = np.empty((n, s), t.dtype)
    du = np.zeros(s, t.dtype)
    dv = np.zeros(s, t.dtype)
    for j in range(n):
        for k in range(s):
            tv = t[j, k]
            g = ds[j] * v[k] * (1.0 - tv * tv)
            dxu[j, k] = g
            du[k] += g
            dv[k] += ds[j] * tv
    return dxu, du, dv


# ---------------------------------------------------------------------------
# Backend registry
# ---------------------------------------------------------------------------

_KERNEL_NAMES = (
    "conv2d_forward",
    "conv2d_backward",
    "lstm_cell_forward",
    "lstm_cell_backward",
    "attn_scores_forward",
    "attn_scores_backward",
)

IMPLS = {
    "numpy": {
        "conv2d_forward": _conv2d_forward_np,
        "conv2d_backward": _conv2d_backward_np,
        "lstm_cell_forward": _lstm_cell_forward_np,
        "lstm_cell_backward": _lstm_cell_backward_np,
        "attn_scores_forward": _attn_scores_forward_np,
        "attn_scores_backward": _attn_scores_backward_np,
    }
}

if NUMBA_AVAILABLE:
    IMPLS["numba"] = {
        "conv2d_forward": njit_if_available(_conv2d_forward_loops),
        "conv2d_backward": njit_if_available(_conv2d_backward_loops),
        "lstm_cell_forward": njit_if_available(_lstm_cell_forward_loops),
        "lstm_cell_backward": njit_if_available(_lstm_cell_backward_loops),
        "attn_scores_forward": njit_if_available(_attn_scores_forward_loops),
        "attn_scores_backward": njit_if_available(_attn_scores_backward_loops),
    }


def available_backends():
    return sorted(IMPLS)


def get_impls(backend):
    """Kernel set for one backend; raises KeyError if not built."""
    return IMPLS[backend]


_active = IMPLS[ACTIVE_BACKEND]
conv2d_forward = _active["conv2d_forward"]
conv2d_backward = _active["conv2d_backward"]
lstm_cell_forward = _active["lstm_cell_forward"]
lstm_cell_backward = _active["lstm_cell_backward"]
attn_scores_forward = _active["attn_scores_forward"]
attn_scores_backward = _active["attn_scores_backward"]
