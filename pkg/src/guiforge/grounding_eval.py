"""Point-in-box grounding accuracy over benchmark JSONL files."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence, TextIO

from .clients import CoordScale, GrounderClient, MalformedOutput, TransportError, parse_coords, to_point
from .data_model import EvalReport, NormBBox, NormPoint, ValidationError, iter_jsonl

log = logging.getLogger(__name__)


class RunError(RuntimeError):
    """The whole evaluation run failed (e.g. every request errored)."""


@dataclass(frozen=True)
class BenchmarkSample:
    image_ref: str
    prompt: str
    gt_bbox: NormBBox
    split: str | None = None

    def __post_init__(self) -> None:
        self.gt_bbox.validate()
        if not self.prompt:
            raise ValidationError("benchmark prompt must be non-empty")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BenchmarkSample":
        return cls(str(d["image"]), str(d["prompt"]), NormBBox.from_list(d["bbox"]), d.get("split"))

    def to_dict(self) -> dict[str, Any]:
        return {"image": self.image_ref, "prompt": self.prompt, "bbox": self.gt_bbox.as_list(), "split": self.split}


def load_benchmark(fp: TextIO) -> list[BenchmarkSample]:
    return [BenchmarkSample.from_dict(json.loads(line)) for _, line in iter_jsonl(fp)]


def convert_benchmark_row(
    row: Mapping[str, Any],
    *,
    image_key: str = "img_filename",
    prompt_key: str = "instruction",
    bbox_key: str = "bbox",
    bbox_format: str = "xywh_px",
    split_key: str | None = "data_type",
    size: tuple[int, int] | None = None,
) -> BenchmarkSample:
    """Map a row from a common public-benchmark layout onto the normalized schema.

    ``bbox_format`` is one of ``xyxy_norm``, ``xyxy_px`` or ``xywh_px``. Pixel
    formats need the image size from ``size`` or the row's width/height keys.
    """
    raw = [float(v) for v in row[bbox_key]]
    if bbox_format == "xyxy_norm":
        box = NormBBox.from_list(raw)
    else:
        w, h = size or (int(row["width"]), int(row["height"]))
        if bbox_format == "xywh_px":
            raw = [raw[0], raw[1], raw[0] + raw[2], raw[1] + raw[3]]
        elif bbox_format != "xyxy_px":
            raise ValueError(f"unknown bbox format {bbox_format!r}")
        box = NormBBox.from_pixels(raw, w, h)
    split = None if split_key is None else row.get(split_key)
    return BenchmarkSample(str(row[image_key]), str(row[prompt_key]), box, split)


def point_in_bbox(p: NormPoint, b: NormBBox) -> bool:
    return b.x1 <= p.x <= b.x2 and b.y1 <= p.y <= b.y2


@dataclass(frozen=True)
class SampleOutcome:
    index: int
    correct: bool
    status: str  # "ok", "unparseable" or "failed"
    raw: str | None = None
    point: NormPoint | None = None


def score_sample(
    index: int, sample: BenchmarkSample, grounder: GrounderClient, scale: CoordScale | str = CoordScale.THOUSAND
) -> SampleOutcome:
    try:
        raw = grounder.ground(sample.image_ref, sample.prompt)
    except TransportError as exc:
        log.warning("sample %d: grounder failed: %s", index, exc)
        return SampleOutcome(index, False, "failed")
    try:
        point = to_point(parse_coords(raw, scale))
    except MalformedOutput:
        return SampleOutcome(index, False, "unparseable", raw)
    return SampleOutcome(index, point_in_bbox(point, sample.gt_bbox), "ok", raw, point)


def aggregate(
    benchmark: str, samples: Sequence[BenchmarkSample], outcomes: Iterable[SampleOutcome]
) -> EvalReport:
    outcomes = sorted(outcomes, key=lambda o: o.index)
    report = EvalReport(benchmark=benchmark, n_samples=len(samples), n_correct=0)
    for o in outcomes:
        split = samples[o.index].split
        report.n_correct += o.correct
        report.n_unparseable += o.status == "unparseable"
        report.n_failed += o.status == "failed"
        if split is not None:
            entry = report.per_split.setdefault(split, {"n_samples": 0, "n_correct": 0})
            entry["n_samples"] += 1
            entry["n_correct"] += int(o.correct)
    for entry in report.per_split.values():
        entry["accuracy_percent"] = 100 * entry["n_correct"] / entry["n_samples"]
    report.per_split = dict(sorted(report.per_split.items()))
    return report


def eval_grounding(
    samples: Sequence[BenchmarkSample],
    grounder: GrounderClient,
    *,
    benchmark: str = "benchmark",
    workers: int = 1,
    scale: CoordScale | str = CoordScale.THOUSAND,
) -> EvalReport:
    """Accuracy = 100 * (#predicted points inside the GT box) / N.

    Box predictions are scored by their center. Unparseable replies and
    transport failures count as wrong; a run where every request fails
    raises :class:`RunError`.
    """
    if not samples:
        raise ValueError("benchmark is empty")

    def one(i: int) -> SampleOutcome:
        return score_sample(i, samples[i], grounder, scale)

    if workers <= 1:
        outcomes = [one(i) for i in range(len(samples))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, range(len(samples))))
    if all(o.status == "failed" for o in outcomes):
        raise RunError(f"all {len(samples)} grounder requests failed")
    return aggregate(benchmark, samples, outcomes)


def eval_benchmarks(
    benchmarks: Mapping[str, Sequence[BenchmarkSample]],
    grounder: GrounderClient,
    **kw: Any,
) -> dict[str, Any]:
    """Per-benchmark reports (overall plus per-split) and their unweighted average."""
    reports = {name: eval_grounding(samples, grounder, benchmark=name, **kw) for name, samples in benchmarks.items()}
    accs = [r.accuracy_percent for r in reports.values()]
    return {
        "benchmarks": {name: r.to_dict() for name, r in reports.items()},
        "average_accuracy_percent": sum(accs) / len(accs) if accs else 0.0,
    }
