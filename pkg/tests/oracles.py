"""Independent reference implementations used only by the test suite."""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate


# --- statistics: naive two-pass formulas over Python floats -----------------

def naive_mean(xs):
    return sum(xs) / len(xs)


def naive_var(xs):
    m = naive_mean(xs)
    return sum((x - m) ** 2 for x in xs) / (len(xs) - 1)


def naive_mae(yh, y):
    return sum(abs(a - b) for a, b in zip(yh, y)) / len(y)


def naive_pearson_r(xs, ys):
    mx, my = naive_mean(xs), naive_mean(ys)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    return sxy / math.sqrt(sxx * syy)


def t_pdf(t, df):
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return c * (1 + t * t / df) ** (-(df + 1) / 2)


def t_two_sided_p_quad(t, df):
    """2 ∫_{|t|}^{∞} pdf, by adaptive quadrature (independent of the incomplete beta path)."""
    tail, _ = integrate.quad(t_pdf, abs(t), np.inf, args=(df,), epsabs=1e-14, epsrel=1e-12, limit=200)
    return 2.0 * tail


def t_quantile_975(df):
    """Solve P(T > q) = 0.025 by bisection on the quadrature tail."""
    lo, hi = 0.0, 1000.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_two_sided_p_quad(mid, df) > 0.05:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def naive_welch(a, b):
    va, vb = naive_var(a) / len(a), naive_var(b) / len(b)
    t = (naive_mean(a) - naive_mean(b)) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    return t, df


# --- attention: explicit loops ------------------------------------------------

def loop_attention(q, k, v):
    """softmax(q kᵀ/√d) v with Python loops over rows."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        s = [float(np.dot(q[i], k[j])) / math.sqrt(q.shape[1]) for j in range(k.shape[0])]
        mx = max(s)
        e = [math.exp(x - mx) for x in s]
        z = sum(e)
        for j in range(k.shape[0]):
            out[i] += (e[j] / z) * v[j]
    return out


class MacCounter:
    """Scalar interpreter: every multiply-add goes through :meth:`dot`."""

    def __init__(self):
        self.macs = 0

    def dot(self, a, b):
        acc = 0.0
        for x, y in zip(a, b):
            acc += x * y
            self.macs += 1
        return acc

    def linear(self, rows, w, b):
        """rows (list of vectors) @ w (d_in × d_out) + b."""
        cols = [[w[i][j] for i in range(len(w))] for j in range(len(w[0]))]
        return [[self.dot(r, c) + b[j] for j, c in enumerate(cols)] for r in rows]


def _ln(row, gain, bias, eps=1e-5):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return [(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gain, bias)]


def _gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def interpret_stem(stem, tokens):
    """Scalar-loop stem pass; returns (outputs m × d, multiply-adds executed).

    Normalisation, softmax and activations are elementwise and not counted.
    """
    p = {name: t.data.tolist() for name, t in stem.named_parameters()}
    cnt = MacCounter()
    n_heads = stem.config.n_heads
    x = [list(map(float, r)) for r in np.asarray(tokens)]
    qs = p["queries"]
    d = len(qs[0])
    dk = d // n_heads
    qn = [_ln(r, p["norm_q.gain"], p["norm_q.bias"]) for r in qs]
    kvn = [_ln(r, p["norm_kv.gain"], p["norm_kv.bias"]) for r in x]
    q = cnt.linear(qn, p["attn.q_proj.weight"], p["attn.q_proj.bias"])
    k = cnt.linear(kvn, p["attn.k_proj.weight"], p["attn.k_proj.bias"])
    v = cnt.linear(kvn, p["attn.v_proj.weight"], p["attn.v_proj.bias"])
    heads = [[0.0] * d for _ in qs]
    for h in range(n_heads):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(len(qs)):
            s = [cnt.dot(q[i][sl], k[j][sl]) / math.sqrt(dk) for j in range(len(x))]
            mx = max(s)
            e = [math.exp(z - mx) for z in s]
            z = sum(e)
            wts = [ei / z for ei in e]
            for c in range(dk):
                heads[i][h * dk + c] = cnt.dot(wts, [v[j][h * dk + c] for j in range(len(x))])
    attn = cnt.linear(heads, p["attn.out_proj.weight"], p["attn.out_proj.bias"])
    hid = [[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(qs, attn)]
    f = cnt.linear([_ln(r, p["norm_ff.gain"], p["norm_ff.bias"]) for r in hid], p["ff.fc1.weight"], p["ff.fc1.bias"])
    f = cnt.linear([[_gelu(v) for v in r] for r in f], p["ff.fc2.weight"], p["ff.fc2.bias"])
    out = [[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(hid, f)]
    return np.array(out), cnt.macs


def count_full_attention_macs(n, d):
    macs = 4 * n * d * d   # q, k, v, output projections
    macs += n * d * n      # scores over all heads
    macs += n * n * d      # weighted values
    return macs


# --- attribution: occlusion ----------------------------------------------------

def occlusion_scores(model, views, volumes, chunk_labels, n_regions):
    """Per-region mean over scans of |Δŷ| / region volume, where Δŷ comes from zeroing
    the region's voxels (each scan's own label map, cropped like the views).

    ``chunk_labels`` has the shape of ``views``.  Returns an array indexed by
    region id − 1; a region absent from every chunk scores 0.
    """
    base = model.predict(views, volumes)
    scores = np.zeros(n_regions)
    for r in range(1, n_regions + 1):
        mask = chunk_labels == r
        if not mask.any():
            continue
        occluded = np.where(mask, 0.0, views)
        delta = np.abs(model.predict(occluded, volumes) - base)
        vol = volumes[:, r - 1]
        scores[r - 1] = np.mean(np.where(vol > 0, delta / np.where(vol > 0, vol, 1.0), 0.0))
    return scores
