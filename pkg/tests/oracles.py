"""Independent reference implementations used as test oracles.

Nothing here imports the package under test; each routine recomputes its
quantity from the defining formula with plain loops.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

# transformer, one scalar at a time


def _rms(x, g, eps):
    ms = sum(v * v for v in x) / len(x)
    return [gi * xi / math.sqrt(ms + eps) for xi, gi in zip(x, g)]


def _matvec(x, W):
    # x: [d_in], W: [d_in][d_out]
    return [sum(x[i] * W[i][j] for i in range(len(x))) for j in range(len(W[0]))]


def _rotate(vec, pos, base):
    hd = len(vec)
    out = list(vec)
    for i in range(hd // 2):
        theta = pos * base ** (-2.0 * i / hd)
        a, b = vec[2 * i], vec[2 * i + 1]
        out[2 * i] = a * math.cos(theta) - b * math.sin(theta)
        out[2 * i + 1] = a * math.sin(theta) + b * math.cos(theta)
    return out


def reference_logits(params: dict, cfg: dict, ids: list[int]) -> np.ndarray:
    """Single unpadded sequence through the decoder, element by element.

    ``params`` maps names to nested lists/arrays in ``[d_in, d_out]`` layout;
    ``cfg`` holds d_model, n_heads, n_layers, rope_base, norm_eps.
    """
    P = {k: np.asarray(v, dtype=np.float64).tolist() for k, v in params.items()}
    d, H, eps, base = cfg["d_model"], cfg["n_heads"], cfg["norm_eps"], cfg["rope_base"]
    hd = d // H
    L = len(ids)
    h = [list(P["embed"][t]) for t in ids]
    for layer in range(cfg["n_layers"]):
        pre = f"layers.{layer}."
        xs = [_rms(h[t], P[pre + "attn_norm"], eps) for t in range(L)]
        qkv = [_matvec(x, P[pre + "qkv"]) for x in xs]
        attn_out = [[0.0] * d for _ in range(L)]
        for head in range(H):
            sl = slice(head * hd, (head + 1) * hd)
            q = [_rotate(qkv[t][0:d][sl], t, base) for t in range(L)]
            k = [_rotate(qkv[t][d : 2 * d][sl], t, base) for t in range(L)]
            v = [qkv[t][2 * d : 3 * d][sl] for t in range(L)]
            for t in range(L):
                scores = [sum(q[t][j] * k[s][j] for j in range(hd)) / math.sqrt(hd) for s in range(t + 1)]
                top = max(scores)
                w = [math.exp(sc - top) for sc in scores]
                z = sum(w)
                for j in range(hd):
                    attn_out[t][head * hd + j] = sum(w[s] / z * v[s][j] for s in range(t + 1))
        proj = [_matvec(a, P[pre + "out"]) for a in attn_out]
        h = [[h[t][j] + proj[t][j] for j in range(d)] for t in range(L)]
        xs = [_rms(h[t], P[pre + "ffn_norm"], eps) for t in range(L)]
        for t in range(L):
            g = _matvec(xs[t], P[pre + "gate"])
            u = _matvec(xs[t], P[pre + "up"])
            act = [gi / (1.0 + math.exp(-gi)) * ui for gi, ui in zip(g, u)]
            down = _matvec(act, P[pre + "down"])
            h[t] = [h[t][j] + down[j] for j in range(d)]
    out = []
    for t in range(L):
        x = _rms(h[t], P["final_norm"], eps)
        out.append(_matvec(x, P["lm_head"]))
    return np.asarray(out)


def central_difference(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, entry by entry."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


# metrics


def ngram_list(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def clipped_overlap(cand, ref, n):
    c, r = ngram_list(cand, n), ngram_list(ref, n)
    total = 0
    for g in set(c):
        total += min(c.count(g), r.count(g))
    return total, len(c), len(r)


def prf(p, r):
    return (p, r, 0.0 if p + r == 0 else 2 * p * r / (p + r))


def rouge_n_oracle(cand, ref, n):
    ov, nc, nr = clipped_overlap(cand, ref, n)
    if nc == 0 or nr == 0:
        return (0.0, 0.0, 0.0)
    return prf(ov / nc, ov / nr)


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def lcs_bruteforce(a, b):
    """Longest common subsequence by trying every subset of the shorter side."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for size in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), size):
            if is_subsequence([short[i] for i in idx], long_):
                return size
    return 0


def lcs_recursive(a, b):
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge_l_oracle(cand, ref, lcs=lcs_recursive):
    if not cand or not ref:
        return (0.0, 0.0, 0.0)
    ell = lcs(tuple(cand), tuple(ref))
    return prf(ell / len(cand), ell / len(ref))


def bleu_oracle(cands, refs, max_n=4, smooth=True):
    """Corpus BLEU in percent; exponential smoothing divides the k-th zero by 2**k."""
    hits = [0] * max_n
    tot = [0] * max_n
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    for c, r in zip(cands, refs):
        for n in range(1, max_n + 1):
            ov, nc, _ = clipped_overlap(c, r, n)
            hits[n - 1] += ov
            tot[n - 1] += nc
    if c_len == 0:
        return 0.0
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    logs = []
    k = 0
    for h, t in zip(hits, tot):
        if h:
            logs.append(math.log(h / t))
        elif smooth:
            k += 1
            logs.append(math.log(1.0 / (2**k * max(t, 1))))
        else:
            return 0.0
    return 100 * bp * math.exp(sum(logs) / max_n)


# optimizer


def adam_scalar_trace(p0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    p, m, v = p0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
        out.append(p)
    return out


# decoding


def exhaustive_best(logprob_fn, vocab: int, steps: int, stop: int | None):
    """Best length-normalized sequence over every continuation up to ``steps``.

    ``logprob_fn(prefix)`` returns a list of next-token log-probabilities.
    Sequences end at the stop token (counted in the length) or at ``steps``.
    Ties go to the lexicographically smaller id tuple.
    """
    best = None
    stack = [((), 0.0)]
    while stack:
        seq, lp = stack.pop()
        if seq and (seq[-1] == stop or len(seq) == steps):
            key = (-(lp / len(seq)), seq)
            if best is None or key < best:
                best = key
            continue
        row = logprob_fn(seq)
        for tok in range(vocab):
            stack.append((seq + (tok,), lp + row[tok]))
    return list(best[1]), -best[0]
