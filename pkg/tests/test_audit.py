import math
from collections import Counter

import pytest

from henonlab.audit import (GrammarError, analytic_combinatorial_table, average_recurrence,
                            build_renorm_chain, combinatorial_bound_check, compositions_by_parts,
                            count_compositions, metric_bound_check)


def enumerate_compositions(limit, r_delta):
    """Walk every tuple of parts >= r_delta with sum <= limit; tally by sum."""
    tally = Counter()
    stack = [0]
    while stack:
        s = stack.pop()
        for r in range(r_delta, limit - s + 1):
            tally[s + r] += 1
            stack.append(s + r)
    return tally


@pytest.mark.parametrize("r_delta", [3, 5, 10])
def test_count_matches_enumeration(r_delta):
    tally = enumerate_compositions(40, r_delta)
    for R in range(0, 41):
        assert count_compositions(R, r_delta) == tally.get(R, 0)
        assert sum(compositions_by_parts(R, r_delta).values()) == tally.get(R, 0)


def test_known_value():
    assert count_compositions(12, 5) == 4


def test_analytic_table_shape():
    rows = analytic_combinatorial_table(5, 0.4 / 15, 30)
    assert rows[0]["R"] == 5 and rows[-1]["R"] == 30
    assert all(r["log_cap"] > 0 for r in rows)


def rec(ident, lo, hi, E, escapes, n=3, slot=0):
    return {"type": "element", "n": n, "slot": slot, "id": ident, "lo": lo, "hi": hi, "E": E,
            "escapes": escapes, "status": "active", "class": "escape", "parent": None, "r": 0}


def synthetic():
    # birth escape on [0, 1]; a return of depth 5 then an escape splits off [0, 0.25]
    return [
        rec("a", 0.0, 0.25, 5, [[1, 0.0, 1.0, 0, 0], [3, 0.0, 0.25, 5, 5]]),
        rec("b", 0.25, 0.5, 0, [[1, 0.0, 1.0, 0, 0], [3, 0.25, 0.5, 0, 0]]),
        rec("c", 0.5, 1.0, 0, [[1, 0.0, 1.0, 0, 0]]),
    ]


def test_chain_levels_and_padding():
    ch = build_renorm_chain(synthetic(), 0, (0.0, 1.0), 3)
    assert [len(l) for l in ch.levels] == [1, 3, 3]
    root = next(iter(ch.levels[0]))
    kids = ch.descendants(0, root)
    assert sorted(k.length for k in kids) == [0.25, 0.25, 0.5]
    assert sorted(ch.delta_E(0, root, k) for k in kids) == [0, 0, 5]


def test_metric_and_combinatorial_margins():
    ch = build_renorm_chain(synthetic(), 0, (0.0, 1.0), 3)
    kb = 0.05
    met = metric_bound_check(ch, kb)
    assert met["violations"] == 0
    assert met["count"] == 6 and met["min_margin"] == 0.0  # padded levels have zero margin
    com = combinatorial_bound_check(ch, kb, 5)
    assert com["count"] == 1 and com["violations"] == 0
    avg = average_recurrence(ch, kb, 5)
    assert avg["integral"] == pytest.approx(math.exp(0.25) * 0.25 + 0.75)
    # a larger budget constant makes the depth-5 descendant too long
    assert metric_bound_check(ch, 0.1)["violations"] == 1


@pytest.mark.parametrize("field, value", [(0, [1, 0.0, 1.0, 3, 0]), (1, [3, 0.3, 0.6, 0, 0])])
def test_bad_ancestry_is_rejected(field, value):
    bad = synthetic()
    bad[1]["escapes"][field] = value
    with pytest.raises(GrammarError):
        build_renorm_chain(bad, 0, (0.0, 1.0), 3)
