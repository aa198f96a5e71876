"""Independent reference computations used to freeze expected test values."""

import itertools

import numpy as np


def brute_force_min_assignment(cost: np.ndarray) -> float:
    """Minimum-cost one-to-one assignment by exhaustive enumeration."""
    G, P = cost.shape
    best = float("inf")
    if G <= P:
        for cols in itertools.permutations(range(P), G):
            best = min(best, sum(cost[r, cols[r]] for r in range(G)))
    else:
        for rows in itertools.permutations(range(G), P):
            best = min(best, sum(cost[rows[c], c] for c in range(P)))
    return best


def scalar_focal(p: float, target: int, alpha: float = 0.25, gamma: float = 2.0) -> float:
    p_t = p if target == 1 else 1 - p
    a_t = alpha if target == 1 else 1 - alpha
    return -a_t * (1 - p_t) ** gamma * np.log(p_t)


def scalar_focal_cost(p: float, alpha: float = 0.25, gamma: float = 2.0) -> float:
    pos = alpha * (1 - p) ** gamma * (-np.log(p))
    neg = (1 - alpha) * p**gamma * (-np.log(1 - p))
    return pos - neg


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def direct_ap_101(scores, flags, num_positives: int) -> float:
    """All-thresholds precision/recall AP, 101 recall points, O(n^2) scan."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    if num_positives == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    flags = flags[order]
    total = 0.0
    for r in np.linspace(0, 1, 101):
        best = 0.0
        tp = fp = 0
        for k in range(len(flags)):
            tp += bool(flags[k])
            fp += not flags[k]
            recall = tp / num_positives
            prec = tp / (tp + fp)
            if recall >= r:
                best = max(best, prec)
        total += best
    return total / 101


def finite_difference_grad(fn, x, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar fn with respect to array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn(x)
        flat[i] = orig - eps
        dn = fn(x)
        flat[i] = orig
        gf[i] = (up - dn) / (2 * eps)
    return g
