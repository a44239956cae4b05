"""Independent reference implementations shared by the unit and acceptance tests."""
import itertools

import numpy as np

from steeradv.hgpo import FEASIBILITY_FIRST, WITHIN_FEASIBILITY


def central_difference(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def enumerate_pairs(indices, feasible, pref, margin):
    """Every valid ``(winner, loser, rule, gap)`` by exhaustive search."""
    out = []
    for (w, fw, rw), (l, fl, rl) in itertools.permutations(zip(indices, feasible, pref), 2):
        if fw and not fl:
            out.append((w, l, FEASIBILITY_FIRST, rw - rl))
        elif fw and fl and rw - rl > margin:
            out.append((w, l, WITHIN_FEASIBILITY, rw - rl))
    return out


def capped_oracle(indices, feasible, pref, margin, k):
    """The enumeration sorted by rule, descending gap, then (winner, loser), cut at ``k``."""
    rank = {FEASIBILITY_FIRST: 0, WITHIN_FEASIBILITY: 1}
    full = sorted(enumerate_pairs(indices, feasible, pref, margin), key=lambda p: (rank[p[2]], -p[3], p[0], p[1]))
    return [(w, l, rule) for w, l, rule, _ in full[:k]]


def as_tuples(pairs):
    return [(p.winner, p.loser, p.rule) for p in pairs]
