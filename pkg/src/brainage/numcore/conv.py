"""3D cross-correlation with im2col forward and col2im backward."""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, _make, as_tensor


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected an int or a 3-tuple, got {v}")
    return v


def _pads(padding) -> tuple[tuple[int, int], ...]:
    """Normalise an int, a 3-tuple of ints, or three (before, after) pairs."""
    if isinstance(padding, (int, np.integer)):
        return ((int(padding),) * 2,) * 3
    padding = tuple(padding)
    if len(padding) != 3:
        raise ShapeError(f"expected an int, a 3-tuple or three (before, after) pairs, got {padding}")
    out = []
    for p in padding:
        if isinstance(p, (int, np.integer)):
            out.append((int(p), int(p)))
        else:
            lo, hi = p
            out.append((int(lo), int(hi)))
    if any(v < 0 for pair in out for v in pair):
        raise ShapeError(f"padding must be non-negative, got {padding}")
    return tuple(out)


def conv_output_shape(in_shape, kernel, stride=1, padding=0) -> tuple[int, int, int]:
    """Per-axis extent ``floor((in + p_before + p_after - k) / s) + 1``."""
    k, s, p = _triple(kernel), _triple(stride), _pads(padding)
    padded = [n + lo + hi for n, (lo, hi) in zip(in_shape, p)]
    out = tuple((n - kk) // ss + 1 for n, kk, ss in zip(padded, k, s))
    if any(n < kk for n, kk in zip(padded, k)) or any(o <= 0 for o in out):
        raise ShapeError(f"conv3d: kernel {k} with padding {p} does not fit input extent {tuple(in_shape)}")
    return out


def centered_paddings(in_shape, kernel, stride, n_stages: int) -> list[tuple[tuple[int, int], ...]]:
    """(before, after) pads for ``n_stages`` identical strided convolutions.

    Each stage yields ``ceil(n / s)`` outputs.  Among the pad splits that do
    so, pick per axis the combination whose final window centres have their
    mean closest to the middle of the original axis (symmetric padding of a
    strided stack drifts toward the leading edge by up to half the final
    stride).
    """
    k, s = _triple(kernel), _triple(stride)
    per_axis = []
    for n0, kk, ss in zip(in_shape, k, s):
        target = (n0 - 1) / 2.0
        best = None
        sizes, totals = [n0], []
        for _ in range(n_stages):
            o = -(-sizes[-1] // ss)
            totals.append(max((o - 1) * ss + kk - sizes[-1], 0))
            sizes.append(o)
        for los in itertools.product(*[range(t + 1) for t in totals]):
            a, b, drift = 1.0, 0.0, 0.0
            for lo, n_out in zip(los, sizes[1:]):
                b = a * ((kk - 1) / 2.0 - lo) + b
                a *= ss
                drift += abs(a * (n_out - 1) / 2.0 + b - target)
            key = (abs(a * (sizes[-1] - 1) / 2.0 + b - target), drift, los)
            if best is None or key < best:
                best = key
        per_axis.append([(lo, t - lo) for lo, t in zip(best[2], totals)])
    return [tuple(axis[i] for axis in per_axis) for i in range(n_stages)]


def conv3d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlate ``x`` (C,H,W,D) or (B,C,H,W,D) with ``weight`` (C',C,kh,kw,kd).

    ``padding`` is an int, a 3-tuple, or three (before, after) pairs of
    zeros.  Returns (C',H',W',D') or (B,C',H',W',D') to match the input rank.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    unbatched = x.ndim == 4
    if x.ndim not in (4, 5):
        raise ShapeError(f"conv3d input must be (C,H,W,D) or (B,C,H,W,D), got {x.shape}")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d weight must be (C_out,C_in,kh,kw,kd), got {weight.shape}")
    xd = x.data[None] if unbatched else x.data
    B, C = xd.shape[:2]
    O, Cw = weight.shape[:2]
    if C != Cw:
        raise ShapeError(f"conv3d: input has {C} channels but weight {weight.shape} expects {Cw}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} must be ({O},)")
    k = weight.shape[2:]
    s, p = _triple(stride), _pads(padding)
    Ho, Wo, Do = conv_output_shape(xd.shape[2:], k, s, p)

    xp = np.pad(xd, ((0, 0), (0, 0)) + p) if any(v for pair in p for v in pair) else xd
    win = sliding_window_view(xp, k, axis=(2, 3, 4))[:, :, :: s[0], :: s[1], :: s[2]]
    win = win[:, :, :Ho, :Wo, :Do]
    ksz = C * k[0] * k[1] * k[2]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(B * Ho * Wo * Do, ksz)
    wmat = weight.data.reshape(O, ksz)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, Do, O).transpose(0, 4, 1, 2, 3)
    if unbatched:
        out = out[0]
    out = np.ascontiguousarray(out)
    xp_shape = xp.shape

    def bw(g):
        gb = g[None] if unbatched else g
        gm = gb.transpose(0, 2, 3, 4, 1).reshape(-1, O)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gbias = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(B, Ho, Wo, Do, C, *k)
            dxp = np.zeros(xp_shape)
            for i, j, l in itertools.product(range(k[0]), range(k[1]), range(k[2])):
                dxp[
                    :, :,
                    i : i + s[0] * Ho : s[0],
                    j : j + s[1] * Wo : s[1],
                    l : l + s[2] * Do : s[2],
                ] += dcols[..., i, j, l].transpose(0, 4, 1, 2, 3)
            gx = dxp[:, :, p[0][0] : xp_shape[2] - p[0][1], p[1][0] : xp_shape[3] - p[1][1],
                     p[2][0] : xp_shape[4] - p[2][1]]
            if unbatched:
                gx = gx[0]
        return (gx, gw, gbias) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, bw, "conv3d")
