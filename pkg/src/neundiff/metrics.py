"""Point-set agreement metrics for rater and method annotations."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.spatial import cKDTree

from .raster import PointSet

DEFAULT_RADIUS = 11.0


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class Matching:
    pairs: list  # (index_in_a, index_in_b, distance)
    radius: float
    unmatched_a: list = field(default_factory=list)
    unmatched_b: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)


def _candidate_pairs(a: np.ndarray, b: np.ndarray, radius: float):
    if len(a) == 0 or len(b) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    # generous query radius; the exact integer test below decides
    hits = cKDTree(a).query_ball_tree(cKDTree(b), radius + 1e-6)
    ia = np.repeat(np.arange(len(a)), [len(h) for h in hits])
    ib = np.fromiter((j for h in hits for j in h), dtype=np.int64, count=len(ia))
    ok = ((a[ia] - b[ib]) ** 2).sum(axis=1) <= radius * radius
    return ia[ok], ib[ok]


def match_points(a: PointSet, b: PointSet, radius: float = DEFAULT_RADIUS) -> Matching:
    """Greedy one-to-one matching by ascending Euclidean distance.

    Only pairs within ``radius`` are considered.  Equal distances are
    ordered by the unordered coordinate pair ``(min(pa, pb), max(pa, pb))``,
    so the result depends only on the two sets, not their order, and is
    symmetric under swapping ``a`` and ``b``.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    A, B = a.as_array(), b.as_array()
    ia, ib = _candidate_pairs(A, B, radius)
    pairs = []
    used_a = np.zeros(len(A), dtype=bool)
    used_b = np.zeros(len(B), dtype=bool)
    if len(ia):
        pa, pb = A[ia], B[ib]
        d2 = ((pa - pb) ** 2).sum(axis=1)
        # lexicographic (x, y) comparison of the two endpoints
        a_first = (pa[:, 0] < pb[:, 0]) | ((pa[:, 0] == pb[:, 0]) & (pa[:, 1] <= pb[:, 1]))
        lo = np.where(a_first[:, None], pa, pb)
        hi = np.where(a_first[:, None], pb, pa)
        order = np.lexsort((hi[:, 1], hi[:, 0], lo[:, 1], lo[:, 0], d2))
        for k in order:
            i, j = ia[k], ib[k]
            if used_a[i] or used_b[j]:
                continue
            used_a[i] = used_b[j] = True
            pairs.append((int(i), int(j), float(np.sqrt(d2[k]))))
    return Matching(
        pairs,
        float(radius),
        [int(i) for i in np.nonzero(~used_a)[0]],
        [int(j) for j in np.nonzero(~used_b)[0]],
    )


def pairwise_agreement(a: PointSet, b: PointSet, radius: float = DEFAULT_RADIUS) -> float:
    """Matched count over union size, ``m / (|a| + |b| - m)``."""
    if len(a) == 0 and len(b) == 0:
        if not radius > 0:
            raise ValueError(f"radius must be positive, got {radius}")
        return 1.0
    m = len(match_points(a, b, radius))
    return m / (len(a) + len(b) - m)


def delta_ratio(experts, method: PointSet, radius: float = DEFAULT_RADIUS) -> float:
    """Mean inter-expert agreement divided by mean expert-method agreement.

    1.0 means the method agrees with the experts exactly as well as they
    agree with each other.
    """
    experts = list(experts)
    if len(experts) < 2:
        raise ValueError("delta_ratio needs at least two expert sets")
    between = np.mean([pairwise_agreement(i, j, radius) for i, j in combinations(experts, 2)])
    with_method = np.mean([pairwise_agreement(e, method, radius) for e in experts])
    if with_method == 0:
        raise DegenerateInputError("method agrees with no expert; ratio undefined")
    return float(between / with_method)


def overlap_clusters(experts, radius: float = DEFAULT_RADIUS) -> list:
    """Group annotations across raters into clusters.

    Raters are folded in one at a time, matched against the current
    consensus (each cluster represented by its first point).  Returns a
    list of sets of rater indices, one per cluster.
    """
    experts = list(experts)
    reps: list[tuple[int, int]] = []
    members: list[set] = []
    for r, ps in enumerate(experts):
        m = match_points(PointSet(tuple(reps)), ps, radius)
        for ci, _, _ in m.pairs:
            members[ci].add(r)
        for j in m.unmatched_b:
            reps.append(ps.points[j])
            members.append({r})
    return members


def overlap_breakdown(experts, radius: float = DEFAULT_RADIUS) -> dict:
    """Fraction of annotation clusters marked by exactly k raters, k = 1..n."""
    experts = list(experts)
    if len(experts) < 2:
        raise ValueError("overlap_breakdown needs at least two rater sets")
    clusters = overlap_clusters(experts, radius)
    n = len(experts)
    counts = np.bincount([len(c) for c in clusters], minlength=n + 1)
    total = len(clusters)
    if total == 0:
        return {k: 0.0 for k in range(1, n + 1)}
    return {k: counts[k] / total for k in range(1, n + 1)}


def detection_stats(truth: PointSet, detected: PointSet, radius: float = DEFAULT_RADIUS) -> dict:
    """Counts and rates of ``detected`` against ``truth``.

    No true negatives exist for point annotations, so specificity is not
    reported.  ``agreement_accuracy`` is ``tp / (tp + fp + fn)``.  Empty
    denominators give 1.0 when both sets are empty and 0.0 otherwise.
    """
    tp = len(match_points(truth, detected, radius))
    fn = len(truth) - tp
    fp = len(detected) - tp
    both_empty = len(truth) == 0 and len(detected) == 0

    def rate(num, den):
        if den == 0:
            return 1.0 if both_empty else 0.0
        return num / den

    sens = rate(tp, tp + fn)
    prec = rate(tp, tp + fp)
    if both_empty:
        f1 = 1.0
    else:
        f1 = 2 * prec * sens / (prec + sens) if (prec + sens) > 0 else 0.0
    return {
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "sensitivity": sens,
        "precision": prec,
        "f1": f1,
        "agreement_accuracy": rate(tp, tp + fp + fn),
    }


def agreement_report(raters, method: PointSet | None = None, radius: float = DEFAULT_RADIUS) -> dict:
    """Pairwise table, overlap breakdown and, given a method set, the ratio."""
    raters = list(raters)
    labels = [ps.source_label or f"rater{i}" for i, ps in enumerate(raters)]
    report = {"radius": radius, "pairwise": {}}
    for (i, a), (j, b) in combinations(enumerate(raters), 2):
        report["pairwise"][f"{labels[i]}|{labels[j]}"] = pairwise_agreement(a, b, radius)
    if method is not None:
        mlabel = method.source_label or "method"
        for i, a in enumerate(raters):
            report["pairwise"][f"{labels[i]}|{mlabel}"] = pairwise_agreement(a, method, radius)
    if len(raters) >= 2:
        report["overlap_breakdown"] = {
            str(k): v for k, v in overlap_breakdown(raters, radius).items()
        }
        if method is not None:
            report["delta_ratio"] = delta_ratio(raters, method, radius)
    return report
