"""Exit criteria for the toolkit, one test per criterion.

Each test prints a PASS/FAIL line in the "acceptance criteria" section of
the pytest terminal summary. Tolerances and runtime limits are fixed here.
"""

from __future__ import annotations

import hashlib
import math
import random
import time
from collections import defaultdict
from fractions import Fraction

import pytest

from guiforge.agent_eval import Action, ActionKind, AgentStep, Direction, eval_trajectories, match_action
from guiforge.clients import ClientConfig, HttpGrounder, OracleGrounder, ScriptedPlanner, TransportError
from guiforge.data_model import REG_TYPES, GroundingSample, NormBBox, NormPoint, TaskType
from guiforge.dedup import dedup_samples
from guiforge.grounding_eval import BenchmarkSample, eval_benchmarks, eval_grounding
from guiforge.latency_bench import DEFAULT_TRIALS, LatencyTrace, SSEEndpoint, compute_tpot, compute_ttft, run_bench
from guiforge.refine import CoarsePolicy, RefinePlan, build_ratio_sweep, coarse_filter, extract_subset, run_sweep, select_core_set


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def _rand_box(rng, lo=0.05):
    x1, y1 = rng.uniform(lo, 0.8), rng.uniform(lo, 0.8)
    return NormBBox(x1, y1, x1 + rng.uniform(0.01, 0.19), y1 + rng.uniform(0.01, 0.19))


# ---------------------------------------------------------------------------
# 1. metric formula oracles


class _ListGrounder:
    def __init__(self, replies):
        self.replies = replies

    def ground(self, image_ref, re_text):
        return self.replies[re_text]


def test_criterion_1_metric_formula_oracles():
    rng = random.Random(2024)
    with Timer() as t:
        # grounding accuracy vs brute-force recount
        for case in range(200):
            n = rng.randint(1, 25)
            samples, replies, points = [], {}, []
            for i in range(n):
                box = _rand_box(rng)
                s = BenchmarkSample(f"c{case}-{i}.png", f"q{i}", box, rng.choice(["mobile", "web", "desktop"]))
                samples.append(s)
                roll = rng.random()
                if roll < 0.45:
                    p = (rng.uniform(box.x1, box.x2), rng.uniform(box.y1, box.y2))
                elif roll < 0.9:
                    p = (rng.random(), rng.random())
                else:
                    p = None
                points.append(p)
                replies[s.prompt] = "no idea" if p is None else f"({p[0]!r}, {p[1]!r})"
            report = eval_grounding(samples, _ListGrounder(replies))
            hits = 0
            for s, p in zip(samples, points):
                if p is not None and s.gt_bbox.x1 <= p[0] <= s.gt_bbox.x2 and s.gt_bbox.y1 <= p[1] <= s.gt_bbox.y2:
                    hits += 1
            assert report.n_correct == hits
            assert abs(report.accuracy_percent - hits / n * 100) <= 1e-9

        # Step SR vs hand-folded delta
        for case in range(200):
            n = rng.randint(1, 20)
            steps, replies, key, deltas = [], {}, {}, []
            for i in range(n):
                img = f"s{case}-{i}.png"
                kind = rng.choice(["click", "input_text", "swipe", "navigate_back"])
                good = rng.random() < 0.6
                if kind == "click":
                    box = _rand_box(rng)
                    steps.append(AgentStep(str(i), "task", img, Action(ActionKind.CLICK, NormPoint(0.5, 0.5)), gt_bbox=box))
                    replies[img] = '{"action": "click", "intent": "tap %d"}' % i
                    if good:
                        key[(img, f"tap {i}")] = box
                elif kind == "input_text":
                    steps.append(AgentStep(str(i), "task", img, Action(ActionKind.INPUT_TEXT, text="flights to new york")))
                    replies[img] = '{"action": "input_text", "text": "%s"}' % ("flights to new york" if good else "hotels")
                elif kind == "swipe":
                    steps.append(AgentStep(str(i), "task", img, Action(ActionKind.SWIPE, direction=Direction.UP)))
                    replies[img] = '{"action": "swipe", "direction": "%s"}' % ("up" if good else "left")
                else:
                    steps.append(AgentStep(str(i), "task", img, Action(ActionKind.NAVIGATE_BACK)))
                    replies[img] = '{"action": "%s"}' % ("navigate_back" if good else "navigate_home")
                deltas.append(1 if good else 0)
            report = eval_trajectories(steps, "two-stage", ScriptedPlanner(replies), OracleGrounder(key, miss=NormPoint(0.0, 0.0)))
            assert [int(o.success) for o in report.outcomes] == deltas
            assert abs(report.step_sr - sum(deltas) / n * 100) <= 1e-9

        # TPOT vs direct formula
        for case in range(200):
            t0 = rng.uniform(0, 1000)
            ttft = rng.uniform(0, 2)
            e2e = ttft + rng.uniform(0, 5)
            tokens = rng.randint(2, 400)
            trace = LatencyTrace(t0, t0 + ttft, t0 + e2e, tokens)
            expected = ((t0 + e2e - t0) - (t0 + ttft - t0)) / (tokens - 1)
            assert abs(compute_tpot(trace) - expected) <= 1e-12
            assert abs(compute_ttft(trace) - ttft) <= 1e-9
    assert t.elapsed < 5.0, f"took {t.elapsed:.2f}s"


# ---------------------------------------------------------------------------
# 2. dedup correctness at 10k samples


_VARIANTS = [lambda s: s, str.upper, lambda s: s.title() + "!", lambda s: f"  {s}...", lambda s: s.replace(" ", ", ")]


def _planted_corpus(rng, n_total=10_000):
    """Samples built from planted (cell box, RE, task) keys with known multiplicities."""
    samples, planted = [], []
    sid = 0
    while len(samples) < n_total:
        c = [rng.randint(1, 40), rng.randint(1, 40)]
        cell = (c[0], c[1], c[0] + rng.randint(1, 50), c[1] + rng.randint(1, 50))
        base = f"element {rng.randint(0, 10**6)} label"
        task = rng.choice([TaskType.TEXT_GROUNDING, TaskType.FUNCTIONALITY_GROUNDING, TaskType.TEXT_REG])
        mult = min(rng.choice([1, 1, 1, 2, 3, 5, 8, 20]), n_total - len(samples))
        key = (cell, " ".join(base.split()), task)
        planted.append((key, mult))
        for _ in range(mult):
            # jitter well under half a grid cell so the box stays in its cell
            coords = [min(1.0, max(0.0, v / 100 + rng.uniform(-0.004, 0.004))) for v in cell]
            text = rng.choice(_VARIANTS)(base)
            samples.append(GroundingSample(f"s{sid:06d}", "r", "img", task, text, NormBBox(*coords), "src"))
            sid += 1
    rng.shuffle(samples)
    return samples, planted


def _oracle_dedup(samples, sample_key, seed):
    groups = defaultdict(list)
    for s in samples:
        groups[sample_key[s.sample_id]].append(s)
    kept = set()
    for (cell, text, task), members in groups.items():
        members = sorted(members, key=lambda s: s.sample_id)
        if len(members) == 1:
            kept.add(members[0].sample_id)
            continue
        raw = "\x1f".join((",".join(map(str, cell)), text, task.value))
        digest = hashlib.sha256(raw.encode()).hexdigest()
        kept.add(members[random.Random(f"{seed}:{digest}").randrange(len(members))].sample_id)
    return kept, len(groups)


def test_criterion_2_dedup_correctness():
    rng = random.Random(7)
    samples, planted = _planted_corpus(rng)
    assert len(samples) == 10_000
    sample_key = {}
    # reconstruct each sample's planted key without the library's cleaning code
    by_id = {s.sample_id: s for s in samples}
    sid = 0
    for key, mult in planted:
        for _ in range(mult):
            sample_key[f"s{sid:06d}"] = key
            sid += 1
    assert len(sample_key) == len(by_id)

    with Timer() as t:
        kept, stats = dedup_samples(samples, seed=17)
        assert len(kept) == len(planted) == stats.groups
        assert stats.kept + stats.dropped == 10_000
        again, _ = dedup_samples(list(reversed(samples)), seed=17)
        assert again == kept
        assert dedup_samples(kept, seed=17)[0] == kept
        oracle_kept, n_groups = _oracle_dedup(samples, sample_key, 17)
        assert n_groups == len(planted)
        lib_kept = {s.sample_id for s in kept}
        decisions = [(sid in lib_kept) == (sid in oracle_kept) for sid in by_id]
        assert all(decisions), f"{decisions.count(False)} kept/dropped disagreements"
    assert t.elapsed < 10.0, f"took {t.elapsed:.2f}s"


# ---------------------------------------------------------------------------
# 3. refinement arithmetic


def _round_half_away(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def test_criterion_3_refinement_arithmetic():
    rng = random.Random(3)
    for case in range(100):
        samples, plan_ratios, expected = [], {}, 0
        for b in range(rng.randint(1, 6)):
            src, tt = f"src{b}", rng.choice(list(TaskType))
            if (src, tt) in plan_ratios:
                continue
            n = rng.randint(0, 60)
            r = rng.choice([0, 0.1, 0.25, 0.3, 0.5, 0.75, 0.9, 1.0, round(rng.random(), 3)])
            plan_ratios[(src, tt)] = r
            expected += _round_half_away(Fraction(str(r)) * n)
            samples += [
                GroundingSample(f"{case}-{b}-{i}", "r", "img", tt, "x", NormBBox(0, 0, 0.5, 0.5), src) for i in range(n)
            ]
        subset = extract_subset(samples, RefinePlan(plan_ratios), seed=case)
        assert len(subset) == expected

    tasks = list(TaskType)
    samples = [
        GroundingSample(f"c{i}", "r", "img", tasks[i % len(tasks)], "x", NormBBox(0, 0, 1, 1), "s", era_flag=i % 3 == 0)
        for i in range(400)
    ]
    kept, _ = coarse_filter(samples, CoarsePolicy(drop_reg=True))
    assert {s.sample_id for s in samples} - {s.sample_id for s in kept} == {s.sample_id for s in samples if s.task_type in REG_TYPES}
    kept, _ = coarse_filter(samples, CoarsePolicy(drop_outdated=True))
    assert {s.sample_id for s in samples} - {s.sample_id for s in kept} == {s.sample_id for s in samples if s.era_flag}


# ---------------------------------------------------------------------------
# 4. sweep recovers the analytic argmax


def test_criterion_4_sweep_behavior():
    rng = random.Random(4)
    grid = [i / 10 for i in range(11)]
    sources = [f"major{i}" for i in range(6)]
    types = [TaskType.TEXT_GROUNDING, TaskType.BRIEF_DESC_GROUNDING, TaskType.INTENT_GROUNDING, TaskType.FUNCTIONALITY_GROUNDING]
    buckets = [(s, t) for s in sources for t in types]
    optimum = {b: rng.choice(grid) for b in buckets}
    n = 100
    samples = [
        GroundingSample(f"{s}-{t.value}-{i:03d}", "r", "img", t, "x", NormBBox(0, 0, 1, 1), s)
        for s, t in buckets for i in range(n)
    ] + [GroundingSample(f"minor-{i}", "r", "img", TaskType.TEXT_GROUNDING, "x", NormBBox(0, 0, 1, 1), "minor") for i in range(30)]

    def concave(subset):
        counts = defaultdict(int)
        for smp in subset:
            counts[(smp.source, smp.task_type)] += 1
        score = -sum((counts[b] / n - optimum[b]) ** 2 for b in buckets)
        return {"bench_a": 50 + score, "bench_b": 60 + 2 * score}

    with Timer() as t:
        plans = build_ratio_sweep(sources, types, grid)
        results = run_sweep(samples, plans, concave, seed=1, workers=4)
        plan, core = select_core_set(samples, results, major_sources=sources, seed=1)
    for b in buckets:
        assert plan.ratio_for(b) == optimum[b], b
    assert plan.ratio_for(("minor", TaskType.TEXT_GROUNDING)) == 1.0
    assert len(core) == sum(round(optimum[b] * n) for b in buckets) + 30
    assert t.elapsed < 5.0, f"took {t.elapsed:.2f}s"

    flat = run_sweep(samples, build_ratio_sweep(["major0"], [types[0]], grid), lambda s: {"x": 1.0})
    plan, _ = select_core_set([s for s in samples if s.source == "major0" and s.task_type is types[0]], flat)
    assert plan.ratio_for(("major0", types[0])) == 1.0


# ---------------------------------------------------------------------------
# 5. closed-loop agent evaluation


def _agent_fixture():
    rng = random.Random(5)
    steps, intent_replies, som_replies, key, grounded = [], {}, {}, {}, []
    for i in range(40):
        img = f"traj/{i}.png"
        kind = ["click", "long_press", "input_text", "swipe", "navigate_back", "status_complete", "open_app"][i % 7]
        if kind in ("click", "long_press"):
            cands = [_rand_box(rng, lo=0.1) for _ in range(4)]
            gt_idx = rng.randrange(4)
            # keep the distractor centers out of the target box
            cands = [c if j == gt_idx else NormBBox(0.9, 0.9, 0.95, 0.95) for j, c in enumerate(cands)]
            box = cands[gt_idx]
            steps.append(AgentStep(str(i), "book a flight", img, Action(ActionKind(kind), NormPoint(0.5, 0.5)),
                                   history=tuple(f"step {j}" for j in range(i % 3)), gt_bbox=box, som_candidates=tuple(cands)))
            intent_replies[img] = '{"action": "%s", "intent": "tap element %d"}' % (kind, i)
            som_replies[img] = '{"action": "%s", "tag": %d}' % (kind, gt_idx + 1)
            key[(img, f"tap element {i}")] = box
            grounded.append(i)
            continue
        cands = (NormBBox(0.9, 0.9, 0.95, 0.95),)
        if kind == "input_text":
            gt = Action(ActionKind.INPUT_TEXT, text="cheap flights to new york")
            reply = '{"action": "input_text", "text": "Cheap flights to New York"}'
        elif kind == "open_app":
            gt = Action(ActionKind.OPEN_APP, text="google maps")
            reply = '{"action": "open_app", "text": "google maps"}'
        elif kind == "swipe":
            gt = Action(ActionKind.SWIPE, direction=Direction.DOWN)
            reply = '{"action": "swipe", "direction": "down"}'
        else:
            gt = Action(ActionKind(kind))
            reply = '{"action": "%s"}' % kind
        steps.append(AgentStep(str(i), "book a flight", img, gt, som_candidates=cands))
        intent_replies[img] = som_replies[img] = reply
    return steps, intent_replies, som_replies, key, grounded


def test_criterion_5_closed_loop_agent_evaluation():
    steps, intent_replies, som_replies, key, grounded = _agent_fixture()
    assert len(steps) == 40
    with Timer() as t:
        report = eval_trajectories(steps, "two-stage", ScriptedPlanner(intent_replies), OracleGrounder(key), workers=4)
        assert report.step_sr == 100.0
        assert eval_trajectories(steps, "som", ScriptedPlanner(som_replies)).step_sr == 100.0
        rng = random.Random(55)
        for k in (1, 3, 7, len(grounded)):
            missed = rng.sample(grounded, k)
            corrupt_key = {q: b for q, b in key.items() if int(q[1].rsplit(" ", 1)[1]) not in missed}
            two = eval_trajectories(steps, "two-stage", ScriptedPlanner(intent_replies), OracleGrounder(corrupt_key, miss=NormPoint(0.0, 0.0)))
            assert two.step_sr == 100 * (40 - k) / 40
            bad_som = dict(som_replies)
            for i in missed:
                bad_som[f"traj/{i}.png"] = bad_som[f"traj/{i}.png"].replace('"tag": ', '"tag": 9')
            som = eval_trajectories(steps, "som", ScriptedPlanner(bad_som))
            assert som.step_sr == two.step_sr
            assert [o.success for o in som.outcomes] == [o.success for o in two.outcomes]
    assert t.elapsed < 10.0, f"took {t.elapsed:.2f}s"

    boundary = AgentStep("b", "t", "i", Action(ActionKind.INPUT_TEXT, text="new york"))
    assert not match_action(Action(ActionKind.INPUT_TEXT, text="new jersey"), boundary, 0.5)
    assert match_action(Action(ActionKind.INPUT_TEXT, text="new york city"), boundary, 0.5)


# ---------------------------------------------------------------------------
# 6. latency protocol against a delayed streaming mock


def test_criterion_6_latency_protocol(mock_server):
    mock_server.stream_handler = lambda body: [(0.050, "t0")] + [(0.020, f"t{i}") for i in range(1, 5)]
    ep = SSEEndpoint(mock_server.url)
    with Timer() as t:
        summary = run_bench(ep, "img.png", "find the search bar", n_trials=50, warmup=2)
    ep.close()
    assert summary.n_failed == 0 and len(summary.traces) == 50
    assert abs(summary.ttft["mean"] - 0.050) <= 0.010, summary.ttft
    assert abs(summary.tpot["mean"] - 0.020) <= 0.005, summary.tpot
    assert mock_server.max_in_flight == 1
    assert len(mock_server.requests) == 52
    assert DEFAULT_TRIALS == 2000
    assert t.elapsed < 30.0, f"took {t.elapsed:.2f}s"


# ---------------------------------------------------------------------------
# 7. HTTP robustness under fault injection


def test_criterion_7_http_robustness(mock_server):
    attempts = defaultdict(int)

    def handler(body):
        prompt = body["prompt"]
        attempts[prompt] += 1
        if prompt.startswith("dead"):
            return 503, {"error": "overloaded"}
        if prompt.startswith("flaky") and attempts[prompt] <= 2:
            return 500, {"error": "transient"}
        return 200, {"text": "(0.5, 0.5)"}

    mock_server.handler = handler
    samples = [
        BenchmarkSample("a.png", "ok-1", NormBBox(0.4, 0.4, 0.6, 0.6), "mobile"),
        BenchmarkSample("b.png", "flaky-1", NormBBox(0.4, 0.4, 0.6, 0.6), "mobile"),
        BenchmarkSample("c.png", "dead-1", NormBBox(0.4, 0.4, 0.6, 0.6), "web"),
        BenchmarkSample("d.png", "ok-2", NormBBox(0.0, 0.0, 0.1, 0.1), "web"),
    ]
    sleeps = []
    grounder = HttpGrounder(ClientConfig(url=mock_server.url, retries=2, backoff=0.25, image_mode="uri"))
    grounder._sleep = sleeps.append
    report = eval_grounding(samples, grounder, workers=1)
    grounder.close()
    assert attempts == {"ok-1": 1, "flaky-1": 3, "dead-1": 3, "ok-2": 1}
    assert sleeps == [0.25, 0.5, 0.25, 0.5]
    assert report.n_samples == 4 and report.n_failed == 1
    assert report.n_correct == 2 and report.accuracy_percent == 50.0
    assert report.per_split["web"]["n_correct"] == 0

    with pytest.raises(TransportError):
        HttpGrounder(ClientConfig(url=mock_server.url, retries=0, backoff=0.0, image_mode="uri")).ground("x", "dead-2")
    assert attempts["dead-2"] == 1


# ---------------------------------------------------------------------------
# 8. per-benchmark layout reports on the oracle grounder


def test_criterion_8_report_layout_on_oracle():
    rng = random.Random(8)
    layout = {
        "FuncPred": [None],
        "ScreenSpot": ["mobile-text", "mobile-icon", "desktop-text", "desktop-icon", "web-text", "web-icon"],
        "MOTIF": [None],
        "RefExp": [None],
        "VWB_EG": [None],
        "VWB_AG": [None],
    }
    benches = {}
    for name, splits in layout.items():
        benches[name] = [
            BenchmarkSample(f"{name}/{i}.png", f"{name} target {i}", _rand_box(rng), splits[i % len(splits)])
            for i in range(24)
        ]
    oracle = OracleGrounder.from_benchmark([s for v in benches.values() for s in v])
    result = eval_benchmarks(benches, oracle, workers=4)
    assert set(result["benchmarks"]) == set(layout)
    assert result["average_accuracy_percent"] == 100.0
    for name, rep in result["benchmarks"].items():
        assert rep["accuracy_percent"] == 100.0 and rep["n_samples"] == 24
        expected_splits = {s for s in layout[name] if s is not None}
        assert set(rep["per_split"]) == expected_splits
        assert all(v["accuracy_percent"] == 100.0 for v in rep["per_split"].values())
