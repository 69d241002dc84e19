import math
import random

import pytest

from notespan.batching import (
    BatchPlan, PlanError, benchmark, build_plan, format_benchmark_table,
    padding_cost, plan_bucketed, plan_dynamic, plan_naive, speedup_ratio,
    synthetic_lengths,
)
from oracles import exhaustive_min_padding, padding_tokens_by_counting


def _random_plan(rng, lengths):
    idx = list(range(len(lengths)))
    rng.shuffle(idx)
    batches = []
    while idx:
        take = rng.randrange(1, len(idx) + 1)
        batches.append(idx[:take])
        idx = idx[take:]
    return BatchPlan("naive", list(lengths), batches)


# ---------------------------------------------------------------------------
# padding_cost
# ---------------------------------------------------------------------------

def test_padding_cost_hand_case():
    plan = BatchPlan("naive", [3, 5, 5], [[0, 1, 2]])
    assert padding_cost([3, 5, 5], plan, 1.0) == 2.0


def test_padding_cost_zero_when_equal_lengths():
    rng = random.Random(2)
    lengths = [7] * 12
    for _ in range(20):
        plan = _random_plan(rng, lengths)
        assert padding_cost(lengths, plan, 3.5) == 0.0


def test_padding_cost_matches_counting_oracle():
    rng = random.Random(3)
    for _ in range(100):
        lengths = [rng.randrange(1, 30) for _ in range(50)]
        plan = _random_plan(rng, lengths)
        expected = padding_tokens_by_counting(lengths, plan.batches)
        assert padding_cost(lengths, plan, 1.0) == float(expected)
        c = rng.uniform(0.1, 5.0)
        assert math.isclose(padding_cost(lengths, plan, c), expected * c)


def test_padding_cost_contract_errors():
    plan = plan_naive([3, 4], 2)
    with pytest.raises(PlanError):
        padding_cost([3, 4, 5], plan, 1.0)
    with pytest.raises(PlanError):
        padding_cost([3, 4], plan, 0.0)
    with pytest.raises(PlanError):
        BatchPlan("naive", [3, 4], [])  # covers nothing
    with pytest.raises(PlanError):
        BatchPlan("naive", [3, 4], [[0], [0, 1]])  # duplicate index


# ---------------------------------------------------------------------------
# planners
# ---------------------------------------------------------------------------

def test_hand_case_naive_vs_bucketed():
    lengths = [3, 3, 5, 5]
    naive = plan_naive(lengths, 4)
    assert naive.padding_tokens() == 4
    bucketed = plan_bucketed(lengths, bucket_width=3, batch_size=4)
    assert bucketed.n_batches == 2
    assert bucketed.padding_tokens() == 0


def test_single_sequence_all_strategies():
    for strategy in ("naive", "dynamic", "bucketed"):
        plan = build_plan(strategy, [9], batch_size=4, token_budget=16, bucket_width=4)
        assert plan.n_batches == 1
        assert plan.padding_tokens() == 0


def test_every_plan_is_a_partition():
    rng = random.Random(5)
    for _ in range(50):
        lengths = [rng.randrange(1, 40) for _ in range(rng.randrange(1, 60))]
        bs = rng.randrange(1, 10)
        for strategy in ("naive", "dynamic", "bucketed"):
            plan = build_plan(strategy, lengths, batch_size=bs,
                              bucket_width=rng.randrange(1, 12))
            flat = sorted(i for b in plan.batches for i in b)
            assert flat == list(range(len(lengths)))


def test_dynamic_infeasible_budget():
    with pytest.raises(PlanError):
        plan_dynamic([4, 9, 3], token_budget=8)


def test_dynamic_respects_budget():
    rng = random.Random(7)
    for _ in range(50):
        lengths = [rng.randrange(1, 30) for _ in range(rng.randrange(1, 40))]
        budget = max(lengths) * rng.randrange(1, 5)
        plan = plan_dynamic(lengths, budget)
        for batch, longest in zip(plan.batches, plan.batch_max_lengths):
            assert len(batch) * longest <= budget


def test_dynamic_never_worse_than_naive():
    rng = random.Random(11)
    for trial in range(60):
        n = rng.choice([2, 5, 8, 20, 100, 1000])
        lengths = [rng.randrange(1, 120) for _ in range(n)]
        bs = rng.randrange(1, 17)
        naive = plan_naive(lengths, bs)
        dynamic = plan_dynamic(lengths, bs * max(lengths))
        assert dynamic.padding_tokens() <= naive.padding_tokens()


def test_dynamic_equals_exhaustive_optimum_small():
    rng = random.Random(13)
    for _ in range(40):
        n = rng.randrange(1, 8)
        lengths = [rng.randrange(1, 15) for _ in range(n)]
        bs = rng.randrange(1, 5)
        budget = bs * max(lengths)
        dynamic = plan_dynamic(lengths, budget)
        optimum = exhaustive_min_padding(lengths, token_budget=budget)
        naive_pad = plan_naive(lengths, bs).padding_tokens()
        assert dynamic.padding_tokens() == optimum
        assert optimum <= naive_pad


def test_bucketed_cost_invariant_under_permutation():
    rng = random.Random(17)
    for _ in range(30):
        lengths = [rng.randrange(1, 50) for _ in range(40)]
        base = plan_bucketed(lengths, 8, 4).padding_tokens()
        for _ in range(5):
            shuffled = lengths[:]
            rng.shuffle(shuffled)
            assert plan_bucketed(shuffled, 8, 4).padding_tokens() == base


def test_planners_deterministic():
    lengths = [5, 3, 5, 9, 2, 9, 9]
    for strategy in ("naive", "dynamic", "bucketed"):
        a = build_plan(strategy, lengths, batch_size=2, bucket_width=4)
        b = build_plan(strategy, lengths, batch_size=2, bucket_width=4)
        assert a.batches == b.batches


# ---------------------------------------------------------------------------
# speedup ratio
# ---------------------------------------------------------------------------

def test_identical_plans_ratio_one():
    report = speedup_ratio(6.0, 6.0)
    assert report.ratio == 1.0 and report.reciprocal == 1.0


def test_ratio_direct_case():
    report = speedup_ratio(4.0, 2.0)
    assert report.ratio == 2.0
    assert report.reciprocal == 0.5


def test_zero_optimized_cost_falls_back_to_total_ratio():
    report = speedup_ratio(4.0, 0.0, baseline_total=100.0, optimized_total=60.0)
    assert report.ratio is None and report.reciprocal is None
    assert report.total_ratio == 0.6


def test_measured_time_ratio_from_reported_minutes():
    # 97 minutes before, 56 after: the measured-time ratio is 56/97.
    report = speedup_ratio(97.0, 56.0)
    assert math.isclose(report.reciprocal, 56.0 / 97.0, rel_tol=1e-12)
    assert math.isclose(report.reciprocal, 0.5773195876288659, rel_tol=1e-12)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def test_benchmark_constant_lengths_all_tie():
    results = benchmark([12] * 64, batch_size=8, bucket_width=4)
    assert all(r.padding_tokens == 0 for r in results)
    assert all(r.padding_cost == 0.0 for r in results)


def test_benchmark_bucketed_beats_naive_on_skewed_lengths():
    lengths = synthetic_lengths(1000, seed=99)
    results = {r.strategy: r for r in benchmark(lengths, batch_size=16, bucket_width=8)}
    assert results["bucketed"].padding_tokens <= 0.5 * results["naive"].padding_tokens
    assert results["dynamic"].padding_tokens <= results["naive"].padding_tokens


def test_benchmark_table_lines_up():
    results = benchmark([4, 9, 9, 30], batch_size=2, bucket_width=8)
    table = format_benchmark_table(results)
    lines = table.splitlines()
    assert lines[0].startswith("strategy")
    assert len(lines) == 1 + len(results)


def test_benchmark_requires_strategy():
    with pytest.raises(PlanError):
        benchmark([3, 4], strategies=())


def test_synthetic_lengths_deterministic_and_bounded():
    a = synthetic_lengths(200, seed=7)
    b = synthetic_lengths(200, seed=7)
    assert a == b
    assert all(4 <= x <= 120 for x in a)
    assert len(set(a)) > 10  # genuinely spread out
