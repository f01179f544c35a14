"""Brute-force reference implementations used to freeze expected values.

Nothing in here shares code with the package paths it checks.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np


# --- CTC alignment ----------------------------------------------------------


def ctc_collapse(labels, blank):
    out = []
    prev = None
    for lab in labels:
        if lab != prev and lab != blank:
            out.append(lab)
        prev = lab
    return tuple(out)


@lru_cache(maxsize=None)
def valid_labelings(length, tokens, n_symbols, blank):
    """All frame labelings of ``length`` frames that start on the first
    token, end on the last token and collapse to ``tokens``.

    Enumerates label sequences frame by frame, pruning prefixes whose
    collapse is not a prefix of ``tokens``.
    """
    found = []

    def extend(prefix):
        if len(prefix) == length:
            if prefix[-1] == tokens[-1] and ctc_collapse(prefix, blank) == tokens:
                found.append(prefix)
            return
        for lab in range(n_symbols):
            cand = prefix + (lab,)
            if len(cand) == 1 and lab != tokens[0]:
                continue
            if ctc_collapse(cand, blank) == tokens[: len(ctc_collapse(cand, blank))]:
                extend(cand)

    extend(())
    return np.array(found, dtype=np.int64).reshape(len(found), length)


def best_interval(logits, on, off, tokens, blank):
    labs = valid_labelings(off - on + 1, tuple(tokens), logits.shape[1], blank)
    if labs.shape[0] == 0:
        return -math.inf, None
    frames = np.arange(on, off + 1)
    scores = logits[frames, labs].sum(axis=1)
    k = int(np.argmax(scores))
    return float(scores[k]), labs[k]


def brute_force_align(logits, utterances, blank=0):
    """Enumerate every placement of utterance intervals and every labelling.

    Frames outside all intervals cost nothing. Returns ``(total, spans)``
    where ``spans`` lists ``(onset, offset, per-frame logprobs)`` per
    utterance, or ``(-inf, None)`` when nothing fits.
    """
    T = logits.shape[0]
    cache = {}

    def interval(u, on, off):
        key = (u, on, off)
        if key not in cache:
            cache[key] = best_interval(logits, on, off, utterances[u], blank)
        return cache[key]

    best = (-math.inf, None)

    def rec(u, earliest, acc, spans):
        nonlocal best
        if u == len(utterances):
            if acc > best[0]:
                best = (acc, list(spans))
            return
        for on in range(earliest, T):
            for off in range(on, T):
                score, labs = interval(u, on, off)
                if score == -math.inf:
                    continue
                lp = logits[np.arange(on, off + 1), labs]
                spans.append((on, off, lp))
                rec(u + 1, off + 1, acc + score, spans)
                spans.pop()

    rec(0, 0, 0.0, [])
    return best


def random_log_softmax(rng, T, V, sharpness=2.0):
    z = rng.normal(size=(T, V)) * sharpness
    z -= z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# --- windows ----------------------------------------------------------------


def min_window_mean(values, L):
    values = list(values)
    w = min(L, len(values))
    return min(sum(values[i:i + w]) / w for i in range(len(values) - w + 1))


# --- edit distance ----------------------------------------------------------


def levenshtein_full(a, b):
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(
                d[i - 1][j] + 1,
                d[i][j - 1] + 1,
                d[i - 1][j - 1] + (a[i - 1] != b[j - 1]),
            )
    return d[len(a)][len(b)]


# --- spanning trees -----------------------------------------------------------


def prufer_to_edges(seq, n):
    degree = [1] * n
    for v in seq:
        degree[v] += 1
    edges = []
    for v in seq:
        leaf = min(i for i in range(n) if degree[i] == 1)
        edges.append((leaf, v))
        degree[leaf] -= 1
        degree[v] -= 1
    u, w = [i for i in range(n) if degree[i] == 1]
    edges.append((u, w))
    return edges


def brute_force_mst(points):
    """Minimum total Euclidean length over all n^(n-2) labelled trees."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n <= 1:
        return 0.0
    if n == 2:
        return float(np.sqrt(((pts[0] - pts[1]) ** 2).sum()))
    best = math.inf
    for seq in itertools.product(range(n), repeat=n - 2):
        total = 0.0
        for a, b in prufer_to_edges(seq, n):
            total += math.sqrt(sum((x - y) ** 2 for x, y in zip(pts[a], pts[b])))
        best = min(best, total)
    return best


# --- regression --------------------------------------------------------------


def ridge_augmented_predict(X_train, y, X_test, lam):
    """Standardize, append an intercept column and solve the penalized
    normal equations with the intercept left unpenalized."""
    mu = X_train.mean(axis=0)
    sd = X_train.std(axis=0)
    sd[sd == 0] = 1.0
    Z = np.hstack([(X_train - mu) / sd, np.ones((len(X_train), 1))])
    P = lam * np.eye(Z.shape[1])
    P[-1, -1] = 0.0
    beta = np.linalg.solve(Z.T @ Z + P, Z.T @ y)
    Zt = np.hstack([(X_test - mu) / sd, np.ones((len(X_test), 1))])
    return Zt @ beta


# --- correlation ---------------------------------------------------------------


def pearson_textbook(x, y):
    n = len(x)
    sx, sy = sum(x), sum(y)
    sxx = sum(v * v for v in x)
    syy = sum(v * v for v in y)
    sxy = sum(a * b for a, b in zip(x, y))
    return (n * sxy - sx * sy) / math.sqrt((n * sxx - sx * sx) * (n * syy - sy * sy))
