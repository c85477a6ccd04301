"""Progressive data refinement.

Coarse stage drops whole task categories and outdated-GUI samples. Fine
stage sweeps the inclusion ratio of one (source, task type) bucket at a time,
scores each subset with an external evaluator and composes the best ratio per
bucket into the final core set.
"""

from __future__ import annotations

import hashlib
import logging
import random
import statistics
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Any, Callable, Iterable, Mapping, Sequence

from .data_model import REG_TYPES, GroundingSample, TaskType
from .dedup import round_half_away

log = logging.getLogger(__name__)

Bucket = tuple[str, TaskType]
Evaluator = Callable[[list[GroundingSample]], Mapping[str, float]]


class CoverageError(ValueError):
    """Sweep results do not cover every bucket that needs a ratio."""


@dataclass(frozen=True)
class CoarsePolicy:
    drop_reg: bool = False
    drop_task_types: frozenset[TaskType] = frozenset()
    drop_outdated: bool = False
    outdated_sources: frozenset[str] = frozenset()
    era_cutoff_year: int | None = None

    @property
    def effective_drop_types(self) -> frozenset[TaskType]:
        return frozenset(self.drop_task_types) | (REG_TYPES if self.drop_reg else frozenset())

    def to_dict(self) -> dict[str, Any]:
        return {
            "drop_reg": self.drop_reg,
            "drop_task_types": sorted(t.value for t in self.drop_task_types),
            "drop_outdated": self.drop_outdated,
            "outdated_sources": sorted(self.outdated_sources),
            "era_cutoff_year": self.era_cutoff_year,
        }


@dataclass
class CoarseStats:
    n_input: int = 0
    n_task_type: int = 0
    n_outdated: int = 0

    @property
    def n_kept(self) -> int:
        return self.n_input - self.n_task_type - self.n_outdated

    def to_dict(self) -> dict[str, int]:
        return {
            "n_input": self.n_input,
            "n_dropped_task_type": self.n_task_type,
            "n_dropped_outdated": self.n_outdated,
            "n_kept": self.n_kept,
        }


def _is_outdated(s: GroundingSample, policy: CoarsePolicy) -> bool:
    if s.era_flag or s.source in policy.outdated_sources:
        return True
    era = s.extra.get("era")
    return policy.era_cutoff_year is not None and era is not None and int(era) < policy.era_cutoff_year


def coarse_filter(samples: Iterable[GroundingSample], policy: CoarsePolicy) -> tuple[list[GroundingSample], CoarseStats]:
    drop_types = policy.effective_drop_types
    stats = CoarseStats()
    kept = []
    for s in samples:
        stats.n_input += 1
        if s.task_type in drop_types:
            stats.n_task_type += 1
        elif policy.drop_outdated and _is_outdated(s, policy):
            stats.n_outdated += 1
        else:
            kept.append(s)
    return kept, stats


@dataclass
class RefinePlan:
    ratios: dict[Bucket, float] = field(default_factory=dict)
    default_ratio: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.default_ratio <= 1.0:
            raise ValueError(f"default_ratio must be in [0, 1], got {self.default_ratio}")
        for key, r in self.ratios.items():
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"ratio for {key} must be in [0, 1], got {r}")

    def ratio_for(self, bucket: Bucket) -> float:
        return self.ratios.get(bucket, self.default_ratio)

    @property
    def varied_bucket(self) -> Bucket | None:
        """The single bucket a one-factor sweep plan adjusts, if any."""
        if len(self.ratios) == 1:
            return next(iter(self.ratios))
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "ratios": [
                {"source": src, "task_type": tt.value, "ratio": r}
                for (src, tt), r in sorted(self.ratios.items(), key=lambda kv: (kv[0][0], kv[0][1].value))
            ],
            "default_ratio": self.default_ratio,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RefinePlan":
        ratios = {(str(e["source"]), TaskType(e["task_type"])): float(e["ratio"]) for e in d.get("ratios", [])}
        return cls(ratios=ratios, default_ratio=float(d.get("default_ratio", 1.0)))


def bucket_of(s: GroundingSample) -> Bucket:
    return (s.source, s.task_type)


def n_to_keep(ratio: float, n: int) -> int:
    # Decimal so r*n ties (e.g. 0.5*7) round exactly, away from zero.
    return round_half_away(Decimal(repr(float(ratio))) * n)


def _bucket_rng(seed: int, bucket: Bucket) -> random.Random:
    raw = f"{seed}\x1f{bucket[0]}\x1f{bucket[1].value}".encode("utf-8")
    return random.Random(int.from_bytes(hashlib.sha256(raw).digest()[:8], "big"))


def extract_subset(samples: Sequence[GroundingSample], plan: RefinePlan, seed: int = 0) -> list[GroundingSample]:
    """Keep round(r*n) samples of every bucket, sampled without replacement.

    The draw for a bucket depends only on the seed, the bucket and its
    members, so the same bucket at the same ratio yields the same subset in
    every plan. Input order is preserved.
    """
    buckets: dict[Bucket, list[GroundingSample]] = defaultdict(list)
    for s in samples:
        buckets[bucket_of(s)].append(s)
    keep_ids: set[int] = set()
    for bucket, members in buckets.items():
        ratio = plan.ratio_for(bucket)
        k = n_to_keep(ratio, len(members))
        if k >= len(members):
            keep_ids.update(id(s) for s in members)
            continue
        ordered = sorted(members, key=lambda s: s.sample_id)
        keep_ids.update(id(s) for s in _bucket_rng(seed, bucket).sample(ordered, k))
    return [s for s in samples if id(s) in keep_ids]


def build_ratio_sweep(
    sources: Sequence[str],
    task_types: Sequence[TaskType],
    ratios: Sequence[float],
    default_ratio: float = 1.0,
) -> list[RefinePlan]:
    """One plan per (source, task type, ratio), all other buckets at ``default_ratio``."""
    if not ratios:
        raise ValueError("ratio grid must not be empty")
    return [
        RefinePlan({(src, TaskType(tt)): float(r)}, default_ratio)
        for src in sources
        for tt in task_types
        for r in ratios
    ]


@dataclass
class SweepResult:
    plan: RefinePlan
    per_benchmark: dict[str, float] = field(default_factory=dict)
    failed: bool = False
    error: str | None = None
    n_samples: int = 0

    @property
    def metric(self) -> float:
        if self.failed or not self.per_benchmark:
            return float("nan")
        return statistics.fmean(self.per_benchmark.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "plan": self.plan.to_dict(),
            "metric": None if self.failed else self.metric,
            "per_benchmark": self.per_benchmark,
            "failed": self.failed,
            "error": self.error,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SweepResult":
        return cls(
            plan=RefinePlan.from_dict(d["plan"]),
            per_benchmark={k: float(v) for k, v in (d.get("per_benchmark") or {}).items()},
            failed=bool(d.get("failed", False)),
            error=d.get("error"),
            n_samples=int(d.get("n_samples", 0)),
        )


def run_sweep(
    samples: Sequence[GroundingSample],
    plans: Sequence[RefinePlan],
    evaluator: Evaluator,
    seed: int = 0,
    workers: int = 1,
) -> list[SweepResult]:
    """Evaluate every plan's subset. A failing evaluation marks that result failed; the sweep goes on."""

    def one(plan: RefinePlan) -> SweepResult:
        subset = extract_subset(samples, plan, seed)
        try:
            metrics = {str(k): float(v) for k, v in dict(evaluator(subset)).items()}
            if not metrics:
                raise ValueError("evaluator returned no metrics")
        except Exception as exc:
            log.warning("evaluation failed for plan %s: %s", plan.to_dict(), exc)
            return SweepResult(plan, failed=True, error=str(exc), n_samples=len(subset))
        return SweepResult(plan, metrics, n_samples=len(subset))

    if workers <= 1:
        return [one(p) for p in plans]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, plans))


def best_ratios(results: Iterable[SweepResult]) -> dict[Bucket, float]:
    """Per bucket, the ratio with the highest metric; ties go to the larger ratio."""
    best: dict[Bucket, tuple[float, float]] = {}
    for res in results:
        bucket = res.plan.varied_bucket
        if bucket is None or res.failed or res.metric != res.metric:
            continue
        cand = (res.metric, res.plan.ratios[bucket])
        if bucket not in best or cand > best[bucket]:
            best[bucket] = cand
    return {b: r for b, (_, r) in best.items()}


def select_core_set(
    samples: Sequence[GroundingSample],
    sweep_results: Sequence[SweepResult],
    major_sources: Iterable[str] | None = None,
    seed: int = 0,
) -> tuple[RefinePlan, list[GroundingSample]]:
    """Compose the per-bucket best ratios into one plan and extract it.

    ``major_sources`` defaults to the sources that appear in the sweep.
    Every major-source bucket present in ``samples`` must have a successful
    sweep line. Minor-source buckets keep all their samples.
    """
    chosen = best_ratios(sweep_results)
    if major_sources is None:
        major = {res.plan.varied_bucket[0] for res in sweep_results if res.plan.varied_bucket}
    else:
        major = set(major_sources)
    needed = sorted({bucket_of(s) for s in samples if s.source in major}, key=lambda b: (b[0], b[1].value))
    gaps = [b for b in needed if b not in chosen]
    if gaps:
        listing = ", ".join(f"{src}/{tt.value}" for src, tt in gaps)
        raise CoverageError(f"no sweep results for buckets: {listing}")
    plan = RefinePlan({b: chosen[b] for b in needed}, default_ratio=1.0)
    return plan, extract_subset(samples, plan, seed)


def _dist(values: list[float]) -> dict[str, float]:
    if not values:
        return {"mean": 0.0, "median": 0.0, "min": 0.0, "max": 0.0}
    return {
        "mean": statistics.fmean(values),
        "median": statistics.median(values),
        "min": min(values),
        "max": max(values),
    }


def compute_stats(samples: Sequence[GroundingSample]) -> dict[str, Any]:
    """Task/source composition plus RE length and box area distributions.

    RE lengths are in characters and skip widget-listing payloads.
    """
    n = len(samples)

    def table(counter: Counter) -> dict[str, dict[str, float]]:
        return {
            k: {"count": c, "percent": 100 * c / n}
            for k, c in sorted(counter.items())
        }

    by_type = Counter(s.task_type.value for s in samples)
    by_source = Counter(s.source for s in samples)
    re_lengths = [float(len(s.re_text)) for s in samples if s.task_type is not TaskType.WIDGET_LISTING]
    areas = [s.target_bbox.area for s in samples]
    return {
        "n_samples": n,
        "per_task_type": table(by_type),
        "per_source": table(by_source),
        "re_length_chars": _dist(re_lengths),
        "box_area": _dist(areas),
    }
