"""Complete randomization and the accept/reject assignment loop."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import ceil, sqrt

import numpy as np

from .criteria import BalanceCriterion, qform_values
from .design import DesignModel, MeanDifference
from .errors import BadCounts, MaxDrawsExceeded
from .threshold import Threshold


@dataclass(frozen=True)
class Assignment:
    w: np.ndarray            # n-vector of {0, 1}
    n1: int
    n0: int

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.int8)
        object.__setattr__(self, "w", w)
        if int(w.sum()) != self.n1 or len(w) != self.n1 + self.n0:
            raise BadCounts(f"assignment has {int(w.sum())} ones, expected {self.n1}")


@dataclass(frozen=True)
class RerandomizationResult:
    assignment: Assignment
    draws_used: int
    q_value: float
    mean_diff: MeanDifference
    seed: int | None = None


def complete_randomization(n: int, n1: int, rng: np.random.Generator) -> Assignment:
    """Uniform draw over all assignments with exactly n1 treated units."""
    if not 1 <= n1 < n:
        raise BadCounts(f"need 1 <= n1 < n, got n1={n1}, n={n}")
    w = np.zeros(n, dtype=np.int8)
    w[rng.permutation(n)[:n1]] = 1
    return Assignment(w=w, n1=n1, n0=n - n1)


def _assignment_batch(n: int, n1: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """size x n matrix of independent complete randomizations."""
    template = np.zeros(n, dtype=np.int8)
    template[:n1] = 1
    return rng.permuted(np.tile(template, (size, 1)), axis=1)


def default_max_draws(alpha: float) -> int:
    return ceil(50.0 / alpha)


def rerandomize(
    design: DesignModel,
    criterion: BalanceCriterion,
    threshold: Threshold,
    rng: np.random.Generator,
    max_draws: int | None = None,
) -> RerandomizationResult:
    """Redraw complete randomizations until Q_A <= a; return the first hit.

    Draws happen in growing batches for speed; ``draws_used`` counts the
    position of the accepted draw in the underlying sequence.
    """
    if max_draws is None:
        max_draws = default_max_draws(threshold.alpha_target)
    n, n1, n0 = design.n, design.n1, design.n0
    root_n = sqrt(n)
    x = design.x_std
    batch = min(max(16, ceil(3.0 / threshold.alpha_target)), 4096)
    done = 0
    while done < max_draws:
        size = min(batch, max_draws - done)
        ws = _assignment_batch(n, n1, size, rng)
        scaled = root_n * (ws @ x / n1 - (1 - ws) @ x / n0)
        q = qform_values(criterion, scaled)
        hits = np.nonzero(q <= threshold.a)[0]
        if hits.size:
            i = int(hits[0])
            assignment = Assignment(w=ws[i], n1=n1, n0=n0)
            md = MeanDifference(tau_x=scaled[i] / root_n, scaled=scaled[i])
            return RerandomizationResult(
                assignment=assignment,
                draws_used=done + i + 1,
                q_value=float(q[i]),
                mean_diff=md,
            )
        done += size
        batch = min(batch * 2, 4096)
    raise MaxDrawsExceeded(max_draws)


def batch_accepted(
    design: DesignModel,
    criterion: BalanceCriterion,
    threshold: Threshold,
    count: int,
    rng: np.random.Generator,
    max_draws: int | None = None,
    workers: int = 1,
) -> list[RerandomizationResult]:
    """``count`` independent accepted assignments.

    Each slot runs on its own child generator spawned from ``rng``, so the
    batch is identical for a given input generator state no matter how many
    workers execute it.
    """
    if count < 0:
        raise BadCounts(f"count must be >= 0, got {count}")
    if count == 0:
        return []
    children = rng.spawn(count)

    def one(child):
        return rerandomize(design, criterion, threshold, child, max_draws=max_draws)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, children))
    return [one(child) for child in children]
