import math

import pytest

from guiforge.data_model import REG_TYPES, GroundingSample, NormBBox, TaskType
from guiforge.refine import (
    CoarsePolicy,
    CoverageError,
    RefinePlan,
    SweepResult,
    build_ratio_sweep,
    coarse_filter,
    compute_stats,
    extract_subset,
    run_sweep,
    select_core_set,
)

GT = TaskType.TEXT_GROUNDING
FG = TaskType.FUNCTIONALITY_GROUNDING


def _s(i, source="s1", tt=GT, era_flag=False, re_text="label", box=(0.1, 0.1, 0.3, 0.2)):
    return GroundingSample(f"{source}-{tt.value}-{i:04d}", "r", "img", tt, re_text, NormBBox(*box), source, era_flag)


def _bucket(n, source="s1", tt=GT):
    return [_s(i, source, tt) for i in range(n)]


# ------------------------------------------------------------------ coarse


def test_coarse_examples():
    reg = _s(0, tt=TaskType.TEXT_REG)
    fg = _s(1, tt=FG)
    old = _s(2, era_flag=True)
    kept, stats = coarse_filter([reg, fg, old], CoarsePolicy(drop_reg=True))
    assert kept == [fg, old] and stats.n_task_type == 1
    kept, stats = coarse_filter([reg, fg, old], CoarsePolicy(drop_outdated=True))
    assert kept == [reg, fg] and stats.n_outdated == 1


def test_coarse_outdated_sources_and_era_year():
    wae = _s(0, source="wae")
    dated = GroundingSample("x", "r", "img", GT, "a", NormBBox(0, 0, 1, 1), "rico", extra={"era": 2011})
    modern = _s(1, source="rico")
    policy = CoarsePolicy(drop_outdated=True, outdated_sources=frozenset({"wae"}), era_cutoff_year=2017)
    kept, stats = coarse_filter([wae, dated, modern], policy)
    assert kept == [modern] and stats.n_outdated == 2 and stats.n_kept == 1


def test_coarse_empty_policy_identity():
    samples = [_s(i, tt=tt) for i, tt in enumerate(TaskType)]
    assert coarse_filter(samples, CoarsePolicy())[0] == samples


def test_drop_reg_effective_set():
    assert REG_TYPES <= CoarsePolicy(drop_reg=True).effective_drop_types


# ------------------------------------------------------------------ subset


@pytest.mark.parametrize("n, r, k", [(10, 0.5, 5), (7, 0.25, 2), (7, 0.5, 4), (9, 0.0, 0), (3, 1.0, 3)])
def test_extract_subset_counts(n, r, k):
    samples = _bucket(n)
    out = extract_subset(samples, RefinePlan({("s1", GT): r}), seed=0)
    assert len(out) == k
    assert set(out) <= set(samples)


def test_extract_identity_and_order():
    samples = _bucket(12) + _bucket(5, "s2")
    assert extract_subset(samples, RefinePlan(), 4) == samples
    out = extract_subset(samples, RefinePlan({("s1", GT): 0.5}), 4)
    assert out == [s for s in samples if s in out]


def test_extract_same_bucket_same_draw_across_plans():
    samples = _bucket(20) + _bucket(20, "s2")
    a = extract_subset(samples, RefinePlan({("s1", GT): 0.3}), 7)
    b = extract_subset(samples, RefinePlan({("s1", GT): 0.3, ("s2", GT): 0.5}), 7)
    assert [s for s in a if s.source == "s1"] == [s for s in b if s.source == "s1"]


def test_plan_validation_and_json():
    with pytest.raises(ValueError):
        RefinePlan({("s", GT): 1.5})
    plan = RefinePlan({("s", GT): 0.25, ("t", FG): 0.0}, default_ratio=0.5)
    assert RefinePlan.from_dict(plan.to_dict()) == plan


# ------------------------------------------------------------------ sweep


def test_build_ratio_sweep():
    assert len(build_ratio_sweep(["a"], [GT], [0, 0.5, 1])) == 3
    plans = build_ratio_sweep([f"src{i}" for i in range(6)], list(TaskType)[:4], [0, 0.5, 1])
    assert len(plans) == 72
    assert all(len(p.ratios) == 1 and p.default_ratio == 1.0 for p in plans)
    with pytest.raises(ValueError):
        build_ratio_sweep(["a"], [GT], [])


def test_run_sweep_constant_and_empty():
    samples = _bucket(10)
    plans = build_ratio_sweep(["s1"], [GT], [0, 0.5, 1])
    results = run_sweep(samples, plans, lambda subset: {"a": 50.0, "b": 50.0})
    assert [r.metric for r in results] == [50.0] * 3
    assert run_sweep(samples, [], lambda s: {"a": 1.0}) == []


def test_run_sweep_size_proxy_monotone():
    samples = _bucket(40) + _bucket(30, "s2", FG)
    ratios = [0, 0.1, 0.25, 0.5, 0.75, 1]
    plans = build_ratio_sweep(["s1", "s2"], [GT, FG], ratios)
    results = run_sweep(samples, plans, lambda subset: {"size": float(len(subset))}, seed=3, workers=4)
    assert [r.plan for r in results] == plans
    for i in range(0, len(results), len(ratios)):
        line = [r.metric for r in results[i : i + len(ratios)]]
        assert line == sorted(line)


def test_run_sweep_failure_isolated():
    def flaky(subset):
        if len(subset) == 5:
            raise RuntimeError("trainer crashed")
        return {"acc": 1.0}

    results = run_sweep(_bucket(10), build_ratio_sweep(["s1"], [GT], [0, 0.5, 1]), flaky)
    assert [r.failed for r in results] == [False, True, False]
    assert math.isnan(results[1].metric)
    assert SweepResult.from_dict(results[1].to_dict()).failed


def test_mean_metric():
    r = SweepResult(RefinePlan(), {"a": 40.0, "b": 50.0, "c": 60.0})
    assert r.metric == 50.0


# ------------------------------------------------------------------ core set


def _results(bucket, metrics):
    return [SweepResult(RefinePlan({bucket: r}), {"avg": m}) for r, m in metrics.items()]


def test_select_argmax_and_tie():
    samples = _bucket(10) + _bucket(10, "s1", FG) + _bucket(6, "minor")
    results = _results(("s1", GT), {0: 40, 0.5: 45, 1: 44}) + _results(("s1", FG), {0: 30, 0.5: 30, 1: 30})
    plan, core = select_core_set(samples, results, seed=2)
    assert plan.ratio_for(("s1", GT)) == 0.5
    assert plan.ratio_for(("s1", FG)) == 1.0
    assert plan.ratio_for(("minor", GT)) == 1.0
    assert len(core) == 5 + 10 + 6


def test_select_reports_gaps():
    samples = _bucket(4) + _bucket(4, "s1", FG)
    with pytest.raises(CoverageError, match="s1/FunctionalityGrounding"):
        select_core_set(samples, _results(("s1", GT), {0: 1, 1: 2}))


def test_select_only_grid_ratios():
    grid = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    results = _results(("s1", GT), {r: -(r - 0.33) ** 2 for r in grid})
    plan, _ = select_core_set(_bucket(10), results)
    assert plan.ratio_for(("s1", GT)) in grid and plan.ratio_for(("s1", GT)) == 0.4


# ------------------------------------------------------------------ stats


def test_stats_empty():
    st = compute_stats([])
    assert st["n_samples"] == 0 and st["per_task_type"] == {} and st["box_area"]["mean"] == 0.0


def test_stats_split():
    samples = [_s(i) for i in range(3)] + [_s(9, tt=TaskType.INTENT_GROUNDING)]
    st = compute_stats(samples)
    assert st["per_task_type"]["TextGrounding"] == {"count": 3, "percent": 75.0}
    assert st["per_task_type"]["IntentGrounding"] == {"count": 1, "percent": 25.0}


def test_stats_fixture_table():
    samples = (
        [_s(i, "a", re_text="abcd", box=(0, 0, 0.5, 0.5)) for i in range(2)]
        + [_s(i, "b", FG, re_text="ab", box=(0, 0, 0.1, 0.1)) for i in range(3)]
    )
    st = compute_stats(samples)
    assert st["per_source"] == {"a": {"count": 2, "percent": 40.0}, "b": {"count": 3, "percent": 60.0}}
    assert st["re_length_chars"]["mean"] == pytest.approx((4 * 2 + 2 * 3) / 5)
    assert st["re_length_chars"]["median"] == 2
    assert st["box_area"]["max"] == pytest.approx(0.25)
