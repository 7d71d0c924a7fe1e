"""Independent reference implementations used only by the tests.

They are deliberately naive (explicit loops, exact rational arithmetic) so
they share no code path with the package.
"""

from fractions import Fraction

import numpy as np


def placement_count(size: int, k: int, s: int, p: int, d: int) -> int:
    """Count window positions by walking the padded axis."""
    lo, hi = -p, size + p - 1
    count = 0
    start = lo
    while True:
        last = start + d * (k - 1)
        if last > hi:
            return count
        count += 1
        start += s


def round_half_away(q: Fraction) -> int:
    mag = abs(q)
    n = int(mag)
    if mag - n >= Fraction(1, 2):
        n += 1
    return n if q >= 0 else -n


def quantize_value(x: Fraction, m: int, bits: int = 8) -> int:
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return max(lo, min(hi, round_half_away(x * (Fraction(2) ** m))))


def conv_float_then_quantize(xq, m_in, wq, m_w, bq, m_b, attrs, relu, m_out):
    """Exact rational conv on dequantized operands, then quantize the result.

    ``attrs`` is (ks, st, p, d, group) with 2-tuples; loops over every output
    element and kernel position.
    """
    (kh, kw), (sh, sw), (ph, pw), (dh, dw), g = attrs
    c, h, w = xq.shape
    co = wq.shape[0]
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    cin_g, cout_g = c // g, co // g
    sx = Fraction(1, 2 ** m_in) if m_in >= 0 else Fraction(2 ** -m_in)
    sw_ = Fraction(1, 2 ** m_w) if m_w >= 0 else Fraction(2 ** -m_w)
    sb = Fraction(1, 2 ** m_b) if m_b >= 0 else Fraction(2 ** -m_b)
    out = np.zeros((co, ho, wo), dtype=np.int64)
    for o in range(co):
        grp = o // cout_g
        for i in range(ho):
            for j in range(wo):
                acc = 0
                for ci in range(cin_g):
                    for r in range(kh):
                        for q in range(kw):
                            y = i * sh - ph + r * dh
                            x = j * sw - pw + q * dw
                            if 0 <= y < h and 0 <= x < w:
                                acc += int(xq[grp * cin_g + ci, y, x]) * int(wq[o, ci, r, q])
                val = acc * sx * sw_ + (int(bq[o]) * sb if bq is not None else 0)
                if relu and val < 0:
                    val = Fraction(0)
                out[o, i, j] = quantize_value(val, m_out)
    return out


def maxpool_naive(x, k, s, p=0):
    c, h, w = x.shape
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    out = np.empty((c, ho, wo), dtype=x.dtype)
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                vals = [
                    x[ch, i * s - p + r, j * s - p + q]
                    for r in range(k)
                    for q in range(k)
                    if 0 <= i * s - p + r < h and 0 <= j * s - p + q < w
                ]
                out[ch, i, j] = max(vals)
    return out
