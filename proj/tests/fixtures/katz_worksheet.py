#!/usr/bin/env python3
"""Exact-arithmetic Katz back-off worksheet for the toy corpus in test_ngram.cpp.

Independent of the C++ code path. Prints every log10 probability and back-off
weight so the values can be frozen into the unit test.

  python3 katz_worksheet.py
"""
import math
from collections import Counter
from fractions import Fraction

CORPUS = ["a c c a c c", "c a b c a c a", "b b c c c c c"]
ORDER = 3
MAX_COUNT = 2   # discount r <= 2
CUTOFF = 2      # drop 3-grams seen once


def grams(order):
    c = Counter()
    for line in CORPUS:
        toks = ["<s>"] + line.split() + ["</s>"]
        for i in range(len(toks) - order + 1):
            c[tuple(toks[i:i + order])] += 1
    return c


raw = {n: grams(n) for n in range(1, ORDER + 1)}
# Unigram <s> only ever starts a sentence.
uni_total = sum(c for g, c in raw[1].items() if g != ("<s>",))
prob = {}
for g, c in raw[1].items():
    prob[g] = Fraction(0) if g == ("<s>",) else Fraction(c, uni_total)
prob[("<unk>",)] = Fraction(0)

discount = {}
for n in range(2, ORDER + 1):
    coc = Counter(raw[n].values())
    N = [coc.get(r, 0) for r in range(MAX_COUNT + 2)]
    assert all(N[r] > 0 for r in range(1, MAX_COUNT + 2)), (n, N)
    common = Fraction((MAX_COUNT + 1) * N[MAX_COUNT + 1], N[1])
    assert common < 1, (n, common)
    d = {}
    for r in range(1, MAX_COUNT + 1):
        rstar = Fraction((r + 1) * N[r + 1], N[r])
        ratio = (rstar / r - common) / (1 - common)
        d[r] = ratio if 0 < ratio <= 1 else Fraction(1)
    discount[n] = d
    print(f"# order {n}: N_r={N[1:]} common={common} d={ {r: str(v) for r, v in d.items()} }")

bow = {}


def cond(context, w):
    """p(w | context) under the model built so far (exact)."""
    g = tuple(context) + (w,)
    if g in prob:
        return prob[g]
    if len(g) == 1:
        return Fraction(0)
    return bow.get(tuple(context), Fraction(1)) * cond(context[1:], w)


for n in range(2, ORDER + 1):
    totals = Counter()
    for g, c in raw[n].items():
        totals[g[:-1]] += c
    kept = {g: c for g, c in raw[n].items() if n < 3 or c >= CUTOFF}
    seen, lower = Counter(), Counter()
    for g, c in sorted(kept.items()):
        p = discount[n].get(c, Fraction(1)) * Fraction(c, totals[g[:-1]])
        prob[g] = p
        seen[g[:-1]] += p
        lower[g[:-1]] += cond(g[1:-1], g[-1])
    for h in seen:
        assert 1 - seen[h] > 0 and 1 - lower[h] > 0, h
        bow[h] = (1 - seen[h]) / (1 - lower[h])


def log10(x):
    return -99.0 if x == 0 else math.log10(x)


for g in sorted(prob, key=lambda g: (len(g), g)):
    b = f"\t{math.log10(bow[g]):.12f}" if g in bow else ""
    print(f"{log10(prob[g]):.12f}\t{' '.join(g)}{b}")

def log_cond(context, w):
    """ARPA-style lookup: back-off weights add in log10, a zero unigram reads -99."""
    g = tuple(context) + (w,)
    if g in prob:
        return log10(prob[g])
    if len(g) == 1:
        return -99.0
    b = math.log10(bow[tuple(context)]) if tuple(context) in bow else 0.0
    return b + log_cond(context[1:], w)


for sent in ["a b c", "c c a", "b a d"]:
    toks = ["<s>"] + sent.split() + ["</s>"]
    toks = [t if ("%s" % t,) in prob else "<unk>" for t in toks]
    total = 0.0
    for i in range(1, len(toks)):
        total += log_cond(tuple(toks[max(0, i - ORDER + 1):i]), toks[i])
    print(f"# sentence '{sent}': {total:.12f}")
