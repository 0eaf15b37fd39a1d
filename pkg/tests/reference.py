"""Slow, independent reimplementations used as test oracles.

Nothing here imports the package's reward or model code.  The n-gram counts
use plain lists, F1 goes through precision and recall separately, LCS is a
memoised recursion and the GRU forward pass runs one example at a time with
explicit per-gate matrices.
"""
from functools import lru_cache
from fractions import Fraction

import numpy as np

EOS = 1


def strip(seq, eos=EOS):
    return [t for t in seq if eos is None or t != eos]


def ngrams(seq, n):
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def clipped_matches(cand, ref):
    pool = list(ref)
    hits = 0
    for g in cand:
        if g in pool:
            pool.remove(g)
            hits += 1
    return hits


def rouge_n(z, y, n, eos=EOS, exact=False):
    zc, yc = ngrams(strip(z, eos), n), ngrams(strip(y, eos), n)
    if not zc or not yc:
        return 0
    hits = clipped_matches(zc, yc)
    if hits == 0:
        return 0
    num = Fraction if exact else float
    p, r = num(hits) / len(zc), num(hits) / len(yc)
    return 2 * p * r / (p + r)


def main_reward(z, y, eos=EOS, exact=False):
    total = sum(rouge_n(z, y, n, eos, exact) for n in (1, 2, 3))
    return total / 3


def lcs(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge_l(z, y, eos=EOS):
    zc, yc = strip(z, eos), strip(y, eos)
    k = lcs(zc, yc)
    if k == 0:
        return 0.0
    p, r = k / len(zc), k / len(yc)
    return 2 * p * r / (p + r)


def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def gru_cell(e, h, Wx, Wh, b, H):
    """Textbook GRU step on vectors; gates packed as [reset, update, new]."""
    Wr, Wu, Wn = Wx[:, :H], Wx[:, H:2 * H], Wx[:, 2 * H:]
    Ur, Uu, Un = Wh[:, :H], Wh[:, H:2 * H], Wh[:, 2 * H:]
    br, bu, bn = b[:H], b[H:2 * H], b[2 * H:]
    r = _sig(e @ Wr + h @ Ur + br)
    u = _sig(e @ Wu + h @ Uu + bu)
    n = np.tanh(e @ Wn + (r * h) @ Un + bn)
    return u * h + (1 - u) * n


def gru_loglik(params, x, z, V, H):
    """log p(z | x) for one example, start symbol at index V."""
    h = np.zeros(H)
    for tok in x:
        h = gru_cell(params["emb"][tok], h, params["enc_Wx"], params["enc_Wh"], params["enc_b"], H)
    total = 0.0
    prev = V
    for tok in z:
        h = gru_cell(params["emb"][prev], h, params["dec_Wx"], params["dec_Wh"], params["dec_b"], H)
        logits = h @ params["out_W"] + params["out_b"]
        total += logits[tok] - np.log(np.sum(np.exp(logits)))
        prev = tok
    return total
