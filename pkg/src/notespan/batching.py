"""Padding cost accounting and batch planning for variable-length sequences.

Every sequence in a batch is padded to the batch's own maximum length L, so a
batch of k sequences occupies k*L token slots of which sum(L - l_i) are pure
padding. The planners trade arrival order against padding:

  naive    - arrival order, fixed batch size
  dynamic  - sort by length (descending), then split into contiguous runs
             that minimize total padding subject to a per-batch token budget
             (k * L <= token_budget)
  bucketed - group by floor(length / bucket_width), batch inside each bucket

The dynamic planner solves the run-splitting exactly (quadratic DP over the
sorted order) rather than greedily: for any partition whose batches respect
the token budget, there is a contiguous sorted partition at most as costly,
so the DP result is the true optimum under the budget and is never worse
than the naive plan with batch_size = token_budget // max_length.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class PlanError(ValueError):
    """Invalid planner parameters or infeasible budget."""


@dataclass
class BatchPlan:
    """A partition of sequence indices into padded batches."""
    strategy: str
    lengths: list[int]
    batches: list[list[int]]
    batch_max_lengths: list[int] = field(init=False)
    batch_padding: list[int] = field(init=False)

    def __post_init__(self):
        seen: set[int] = set()
        maxes, pads = [], []
        for batch in self.batches:
            if not batch:
                raise PlanError("empty batch in plan")
            longest = max(self.lengths[i] for i in batch)
            maxes.append(longest)
            pads.append(sum(longest - self.lengths[i] for i in batch))
            for i in batch:
                if i in seen:
                    raise PlanError(f"sequence index {i} appears twice")
                seen.add(i)
        if seen != set(range(len(self.lengths))):
            raise PlanError("plan does not cover every sequence exactly once")
        self.batch_max_lengths = maxes
        self.batch_padding = pads

    @property
    def n_batches(self) -> int:
        return len(self.batches)

    def padding_tokens(self) -> int:
        return sum(self.batch_padding)

    def total_tokens(self) -> int:
        """Padded rectangle area: real tokens plus padding."""
        return sum(len(b) * m for b, m in zip(self.batches, self.batch_max_lengths))


def padding_cost(lengths: Sequence[int], plan: BatchPlan,
                 cost_per_token: float = 1.0) -> float:
    """Total padding cost: sum over batches of sum(L_batch - l_i) * C."""
    if not plan.batches:
        raise PlanError("padding_cost needs a non-empty plan")
    if list(lengths) != plan.lengths:
        raise PlanError("plan was built for different lengths")
    if cost_per_token <= 0:
        raise PlanError(f"cost_per_token must be positive, got {cost_per_token}")
    return plan.padding_tokens() * float(cost_per_token)


def _check_lengths(lengths: Sequence[int]) -> list[int]:
    lengths = [int(x) for x in lengths]
    if not lengths:
        raise PlanError("no sequences to plan")
    if any(x <= 0 for x in lengths):
        raise PlanError("sequence lengths must be positive")
    return lengths


def plan_naive(lengths: Sequence[int], batch_size: int) -> BatchPlan:
    """Fixed-size batches in arrival order."""
    lengths = _check_lengths(lengths)
    if batch_size <= 0:
        raise PlanError(f"batch_size must be positive, got {batch_size}")
    idx = list(range(len(lengths)))
    batches = [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
    return BatchPlan("naive", lengths, batches)


def plan_dynamic(lengths: Sequence[int], token_budget: int) -> BatchPlan:
    """Minimum-padding batches of length-sorted sequences under a token budget.

    Each batch of k sequences padded to its max length m must satisfy
    k * m <= token_budget; a budget below the longest sequence is infeasible.
    Ties in the sort are broken by original index; among equal-cost splits the
    larger batch is preferred.
    """
    lengths = _check_lengths(lengths)
    if token_budget <= 0:
        raise PlanError(f"token_budget must be positive, got {token_budget}")
    longest = max(lengths)
    if token_budget < longest:
        raise PlanError(
            f"token_budget {token_budget} below longest sequence {longest}")
    order = sorted(range(len(lengths)), key=lambda i: (-lengths[i], i))
    sorted_lengths = [lengths[i] for i in order]
    n = len(order)
    prefix = [0] * (n + 1)
    for i, l in enumerate(sorted_lengths):
        prefix[i + 1] = prefix[i] + l

    # best[i] = minimum padding for the tail starting at sorted position i.
    best = [0] * (n + 1)
    split = [0] * n
    for i in range(n - 1, -1, -1):
        head = sorted_lengths[i]
        max_take = min(n - i, token_budget // head)
        best_cost = None
        best_j = i + 1
        for j in range(i + 1, i + max_take + 1):
            block_pad = (j - i) * head - (prefix[j] - prefix[i])
            cost = block_pad + best[j]
            if best_cost is None or cost <= best_cost:
                best_cost = cost
                best_j = j
        best[i] = best_cost
        split[i] = best_j

    batches = []
    i = 0
    while i < n:
        j = split[i]
        batches.append(order[i:j])
        i = j
    return BatchPlan("dynamic", lengths, batches)


def plan_bucketed(lengths: Sequence[int], bucket_width: int,
                  batch_size: int) -> BatchPlan:
    """Bucket sequences of similar length, then batch inside each bucket.

    Bucket b holds lengths in (b*width, (b+1)*width], i.e. everything that
    pads to the same width-multiple ceiling, so an exact multiple shares a
    bucket with shorter sequences rather than longer ones.
    """
    lengths = _check_lengths(lengths)
    if bucket_width <= 0 or batch_size <= 0:
        raise PlanError("bucket_width and batch_size must be positive")
    buckets: dict[int, list[int]] = {}
    for i, l in enumerate(lengths):
        buckets.setdefault((l - 1) // bucket_width, []).append(i)
    batches = []
    for key in sorted(buckets):
        members = sorted(buckets[key], key=lambda i: (lengths[i], i))
        for i in range(0, len(members), batch_size):
            batches.append(members[i:i + batch_size])
    return BatchPlan("bucketed", lengths, batches)


PLANNERS = ("naive", "dynamic", "bucketed")


# ---------------------------------------------------------------------------
# Speedup accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpeedupReport:
    """Baseline-vs-optimized cost comparison.

    `ratio` is baseline padding cost over optimized padding cost, so values
    above 1 mean the optimized plan wastes less; `reciprocal` is the same
    comparison in the other direction (below 1 means the optimized plan is
    cheaper). When the optimized plan has zero padding cost the division is
    unavailable and `total_ratio` (optimized total tokens over baseline total
    tokens) is the number to read.
    """
    baseline_cost: float
    optimized_cost: float
    ratio: float | None
    reciprocal: float | None
    total_ratio: float | None

    def to_dict(self) -> dict:
        return {
            "baseline_cost": self.baseline_cost,
            "optimized_cost": self.optimized_cost,
            "ratio_baseline_over_optimized": self.ratio,
            "ratio_optimized_over_baseline": self.reciprocal,
            "total_token_ratio": self.total_ratio,
        }


def speedup_ratio(baseline_cost: float, optimized_cost: float,
                  baseline_total: float | None = None,
                  optimized_total: float | None = None) -> SpeedupReport:
    """Compare padding costs; fall back to total-token ratio at zero cost."""
    if baseline_cost < 0 or optimized_cost < 0:
        raise PlanError("costs must be non-negative")
    total_ratio = None
    if baseline_total is not None and optimized_total is not None \
            and baseline_total > 0:
        total_ratio = optimized_total / baseline_total
    if optimized_cost == 0:
        return SpeedupReport(baseline_cost, optimized_cost, None, None, total_ratio)
    ratio = baseline_cost / optimized_cost
    return SpeedupReport(baseline_cost, optimized_cost, ratio,
                         1.0 / ratio, total_ratio)


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------

def synthetic_lengths(n: int, seed: int, median: int = 24, sigma: float = 0.6,
                      min_len: int = 4, max_len: int = 120) -> list[int]:
    """Log-normal-ish sequence lengths, clipped to [min_len, max_len]."""
    rng = np.random.default_rng(seed)
    raw = rng.lognormal(mean=np.log(median), sigma=sigma, size=n)
    return [int(x) for x in np.clip(np.rint(raw), min_len, max_len)]


@dataclass
class StrategyResult:
    strategy: str
    n_batches: int
    padding_tokens: int
    padding_cost: float
    total_tokens: int
    ratio: float | None
    reciprocal: float | None
    total_ratio: float | None
    wall_ms: float | None = None

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy, "batches": self.n_batches,
            "padding_tokens": self.padding_tokens, "padding_cost": self.padding_cost,
            "total_tokens": self.total_tokens,
            "ratio_baseline_over_optimized": self.ratio,
            "ratio_optimized_over_baseline": self.reciprocal,
            "total_token_ratio": self.total_ratio, "wall_ms": self.wall_ms,
        }


def build_plan(strategy: str, lengths: Sequence[int], batch_size: int,
               token_budget: int | None = None,
               bucket_width: int | None = None) -> BatchPlan:
    if strategy == "naive":
        return plan_naive(lengths, batch_size)
    if strategy == "dynamic":
        budget = token_budget if token_budget is not None \
            else batch_size * max(lengths)
        return plan_dynamic(lengths, budget)
    if strategy == "bucketed":
        return plan_bucketed(lengths, bucket_width or 8, batch_size)
    raise PlanError(f"unknown strategy {strategy!r}")


def run_plan_inference(model, plan: BatchPlan, token_id_rows: Sequence[Sequence[int]]):
    """Run the frozen model over each padded batch; returns wall time in ms.

    Every row really is processed at the batch's padded length, so wall time
    reflects padding waste.
    """
    pad = model.config.pad_token_id
    start = time.perf_counter()
    for batch, longest in zip(plan.batches, plan.batch_max_lengths):
        for i in batch:
            ids = list(token_id_rows[i])
            mask = [False] * len(ids) + [True] * (longest - len(ids))
            ids = ids + [pad] * (longest - len(ids))
            model.span_probabilities(ids, mask)
    return (time.perf_counter() - start) * 1000.0


def benchmark(lengths: Sequence[int], strategies: Sequence[str] = PLANNERS,
              batch_size: int = 16, token_budget: int | None = None,
              bucket_width: int | None = None, cost_per_token: float = 1.0,
              model=None, token_id_rows: Sequence[Sequence[int]] | None = None,
              ) -> list[StrategyResult]:
    """Analytic padding costs per strategy, plus measured wall time if a
    model (and matching token id rows) is supplied. The naive plan is the
    ratio baseline; it is computed even when not requested."""
    if not strategies:
        raise PlanError("benchmark needs at least one strategy")
    lengths = _check_lengths(lengths)
    plans = {name: build_plan(name, lengths, batch_size, token_budget, bucket_width)
             for name in dict.fromkeys(list(strategies) + ["naive"])}
    baseline = plans["naive"]
    baseline_cost = padding_cost(lengths, baseline, cost_per_token)
    results = []
    for name in strategies:
        plan = plans[name]
        cost = padding_cost(lengths, plan, cost_per_token)
        ratios = speedup_ratio(baseline_cost, cost,
                               baseline_total=baseline.total_tokens() * cost_per_token,
                               optimized_total=plan.total_tokens() * cost_per_token)
        wall = None
        if model is not None:
            if token_id_rows is None:
                raise PlanError("wall-time measurement needs token_id_rows")
            wall = run_plan_inference(model, plan, token_id_rows)
        results.append(StrategyResult(
            strategy=name, n_batches=plan.n_batches,
            padding_tokens=plan.padding_tokens(), padding_cost=cost,
            total_tokens=plan.total_tokens(), ratio=ratios.ratio,
            reciprocal=ratios.reciprocal, total_ratio=ratios.total_ratio,
            wall_ms=wall))
    return results


def format_benchmark_table(results: Sequence[StrategyResult]) -> str:
    columns = [("strategy", "strategy"), ("batches", "n_batches"),
               ("padding_tokens", "padding_tokens"), ("padding_cost", "padding_cost"),
               ("total_tokens", "total_tokens"), ("ratio", "ratio"),
               ("reciprocal", "reciprocal"), ("total_ratio", "total_ratio"),
               ("wall_ms", "wall_ms")]

    def fmt(value):
        if value is None:
            return "-"
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    rows = [[fmt(getattr(r, attr)) for _, attr in columns] for r in results]
    widths = [max(len(header), *(len(row[i]) for row in rows)) if rows else len(header)
              for i, (header, _) in enumerate(columns)]
    lines = ["  ".join(h.ljust(w) for (h, _), w in zip(columns, widths))]
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)
