"""Independent transport-plan oracle for 1-D histogram distances.

Enumerates integer transport plans (matrices with the histograms' unit
masses as margins) depth-first and returns the minimum total cost, with
cost |i - j| * width per unit moved between bins i and j. Branches whose
partial cost already reaches the incumbent are cut, which prunes plans
that cannot be minimal but still searches the full plan space.
"""

import numpy as np


def min_transport_cost(a_units, b_units, width=1.0):
    """Minimum cost over all integer transport plans from a to b."""
    a = list(a_units)
    b = list(b_units)
    assert sum(a) == sum(b), "histograms must carry equal mass"
    k = len(a)
    best = [float("inf")]

    # per source bin, try near columns first so the incumbent drops fast
    col_order = [sorted(range(k), key=lambda j, i=i: abs(i - j))
                 for i in range(k)]

    def place_row(i, caps, cost):
        if cost >= best[0]:
            return
        if i == k:
            best[0] = cost
            return
        need = a[i]
        order = col_order[i]

        def alloc(oi, remaining, cost_now):
            if cost_now >= best[0]:
                return
            if remaining == 0:
                place_row(i + 1, caps, cost_now)
                return
            if oi == len(order):
                return
            j = order[oi]
            take_max = min(remaining, caps[j])
            unit_cost = abs(i - j) * width
            # try largest allocation first; 0 last
            for take in range(take_max, -1, -1):
                caps[j] -= take
                alloc(oi + 1, remaining - take, cost_now + take * unit_cost)
                caps[j] += take

        alloc(0, need, cost)

    place_row(0, list(b), 0.0)
    return best[0]


def sorted_matching_cost(a_units, b_units, width=1.0):
    """Cross-check: optimal 1-D matching pairs sorted unit positions."""
    src = np.repeat(np.arange(len(a_units)), a_units)
    dst = np.repeat(np.arange(len(b_units)), b_units)
    return float(np.sum(np.abs(np.sort(src) - np.sort(dst))) * width)


def compositions(total, parts):
    """All tuples of `parts` non-negative ints summing to `total`."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for tail in compositions(total - head, parts - 1):
            yield (head,) + tail
