"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here shares code with the package paths it checks.
"""

import itertools
import math

import numpy as np


# ---------------------------------------------------------------- PCA network

def naive_scatter(images, k):
    r = (k - 1) // 2
    S = np.zeros((k * k, k * k))
    for img in images:
        h, w = img.shape
        for y in range(h):
            for x in range(w):
                patch = []
                for i in range(k):
                    for j in range(k):
                        yy, xx = y + i - r, x + j - r
                        patch.append(img[yy, xx] if 0 <= yy < h and 0 <= xx < w else 0.0)
                patch = np.array(patch)
                patch -= sum(patch) / len(patch)
                S += np.outer(patch, patch)
    return S


def naive_correlate(img, kernel):
    k = kernel.shape[0]
    r = (k - 1) // 2
    h, w = img.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(k):
                for j in range(k):
                    yy, xx = y + i - r, x + j - r
                    if 0 <= yy < h and 0 <= xx < w:
                        acc += kernel[i, j] * img[yy, xx]
            out[y, x] = acc
    return out


def naive_feature(img, kernels1, kernels2, grid=4, window=2, stride=2):
    h, w = img.shape
    L2 = len(kernels2)
    bins = 2 ** L2
    parts = []
    for k1 in kernels1:
        m1 = naive_correlate(img, k1)
        maps2 = [naive_correlate(m1, k2) for k2 in kernels2]
        code = [[sum(2 ** l for l in range(L2) if maps2[l][y][x] > 0) for x in range(w)]
                for y in range(h)]
        ph = math.ceil(max(h - window, 0) / stride) + 1
        pw = math.ceil(max(w - window, 0) / stride) + 1
        pooled = [[max(code[yy][xx]
                       for yy in range(oy * stride, min(oy * stride + window, h))
                       for xx in range(ox * stride, min(ox * stride + window, w)))
                   for ox in range(pw)] for oy in range(ph)]
        hist = [0] * (grid * grid * bins)
        bh, bw = ph // grid, pw // grid
        for y in range(ph):
            for x in range(pw):
                b = min(y // bh, grid - 1) * grid + min(x // bw, grid - 1)
                hist[b * bins + pooled[y][x]] += 1
        parts.extend(hist)
    return np.array(parts, dtype=np.float64)


# ---------------------------------------------------------------- HMM paths

def chain_paths(T, S):
    """All monotone self/next state sequences of length T from 0 to S-1."""
    for moves in itertools.product((0, 1), repeat=T - 1):
        if sum(moves) == S - 1:
            yield np.concatenate([[0], np.cumsum(moves)])


def brute_force_phrase_decode(emis_by_phrase, trans_by_phrase):
    """Exhaustive best (score, phrase index, path) over phrase chains."""
    best = (-math.inf, None, None)
    for i, (E, (ls, ln)) in enumerate(zip(emis_by_phrase, trans_by_phrase)):
        T, S = E.shape
        for path in chain_paths(T, S):
            score = E[0, 0]
            for t in range(1, T):
                prev, cur = path[t - 1], path[t]
                score += (ls[prev] if cur == prev else ln[prev]) + E[t, cur]
            score += ln[S - 1]
            if score > best[0]:
                best = (score, i, path)
    return best


# ---------------------------------------------------------------- edit distance

def brute_force_counts(ref, hyp):
    """Minimum S+D+I over all alignments, enumerated by explicit recursion.

    Returns the set of (S, D, I, H) tuples that reach the minimum cost.
    """
    results = set()

    def walk(i, j, S, D, I, H):
        if i == len(ref) and j == len(hyp):
            results.add((S, D, I, H))
            return
        if i < len(ref) and j < len(hyp):
            if ref[i] == hyp[j]:
                walk(i + 1, j + 1, S, D, I, H + 1)
            else:
                walk(i + 1, j + 1, S + 1, D, I, H)
        if i < len(ref):
            walk(i + 1, j, S, D + 1, I, H)
        if j < len(hyp):
            walk(i, j + 1, S, D, I + 1, H)

    walk(0, 0, 0, 0, 0, 0)
    best = min(s + d + i for s, d, i, _ in results)
    return best, {r for r in results if r[0] + r[1] + r[2] == best}


def all_sequences(alphabet, max_len):
    for n in range(max_len + 1):
        yield from itertools.product(alphabet, repeat=n)


def minimal_count_table(ref, alphabet, max_len):
    """Yield ``(hyp, cost, s_values, preferred)`` for every hyp up to ``max_len``.

    ``s_values`` is a bitmask of every substitution count S reached by some
    minimum-cost alignment (D and I follow from cost and lengths).
    ``preferred`` is the (S, D, I) of the alignment chosen by walking back
    from the end and preferring match/substitution, then deletion, then
    insertion.  Hypotheses are enumerated depth-first so each prefix's DP
    column is computed once.
    """
    n = len(ref)
    # cell = (cost, S bitmask, preferred (S, D, I))
    first = [(i, 1, (0, i, 0)) for i in range(n + 1)]

    def extend(col, word):
        prev_top = col[0]
        out = [(prev_top[0] + 1, prev_top[1], (prev_top[2][0], prev_top[2][1],
                                               prev_top[2][2] + 1))]
        for i in range(1, n + 1):
            sub = ref[i - 1] != word
            diag, up, left = col[i - 1], out[i - 1], col[i]
            options = (
                (diag[0] + sub, diag[1] << sub, (diag[2][0] + sub, diag[2][1], diag[2][2])),
                (up[0] + 1, up[1], (up[2][0], up[2][1] + 1, up[2][2])),
                (left[0] + 1, left[1], (left[2][0], left[2][1], left[2][2] + 1)),
            )
            best = min(o[0] for o in options)
            mask = 0
            for o in options:
                if o[0] == best:
                    mask |= o[1]
            preferred = next(o[2] for o in options if o[0] == best)
            out.append((best, mask, preferred))
        return out

    def walk(prefix, col):
        cost, mask, preferred = col[n]
        yield prefix, cost, mask, preferred
        if len(prefix) < max_len:
            for w in alphabet:
                yield from walk(prefix + (w,), extend(col, w))

    yield from walk((), first)
