"""Expand raw GUI metadata records into grounding, REG and widget-listing samples."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, TextIO

from .data_model import (
    FULL_IMAGE,
    RE_FIELDS,
    GroundingSample,
    GuiElement,
    ScreenshotRecord,
    TaskType,
    ValidationError,
    iter_jsonl,
)

log = logging.getLogger(__name__)

MAX_MALFORMED_FRACTION = 0.5


class FormatError(ValueError):
    """Input is mostly not in the expected record format."""


@dataclass
class ParseResult:
    records: list[ScreenshotRecord]
    n_malformed: int = 0
    malformed_lines: list[int] = field(default_factory=list)

    @property
    def n_lines(self) -> int:
        return len(self.records) + self.n_malformed


def parse_records(stream: TextIO, source: str | None = None) -> ParseResult:
    """Parse newline-delimited record JSON.

    Malformed lines are skipped and counted. More than half malformed raises
    :class:`FormatError`. A non-empty ``source`` tag overrides whatever source
    the lines carry.
    """
    records: list[ScreenshotRecord] = []
    bad: list[int] = []
    for lineno, line in iter_jsonl(stream):
        try:
            d = json.loads(line)
            if not isinstance(d, dict):
                raise ValidationError("line is not a JSON object")
            if source:
                d["source"] = source
            records.append(ScreenshotRecord.from_dict(d))
        except (ValueError, TypeError) as exc:
            log.warning("skipping malformed record on line %d: %s", lineno, exc)
            bad.append(lineno)
    result = ParseResult(records, len(bad), bad)
    if result.n_lines and result.n_malformed / result.n_lines > MAX_MALFORMED_FRACTION:
        raise FormatError(
            f"{result.n_malformed} of {result.n_lines} lines malformed; "
            "input does not look like record JSONL"
        )
    return result


def sample_id_for(record_id: str, element_id: str, task_type: TaskType) -> str:
    key = "\x1f".join((record_id, element_id, task_type.value))
    return hashlib.sha1(key.encode("utf-8")).hexdigest()[:20]


def _usable_target(el: GuiElement) -> bool:
    return el.bbox.is_valid() and not el.bbox.is_degenerate()


def _is_outdated(record: ScreenshotRecord, era_cutoff: int | None) -> bool:
    return era_cutoff is not None and record.gui_era is not None and record.gui_era < era_cutoff


def _make(record, element_id, task_type, re_text, bbox, era_cutoff) -> GroundingSample:
    extra = {} if record.gui_era is None else {"era": record.gui_era}
    return GroundingSample(
        sample_id=sample_id_for(record.record_id, element_id, task_type),
        record_id=record.record_id,
        image_ref=record.image_ref,
        task_type=task_type,
        re_text=re_text,
        target_bbox=bbox,
        source=record.source,
        era_flag=_is_outdated(record, era_cutoff),
        extra=extra,
    )


def generate_samples(record: ScreenshotRecord, era_cutoff: int | None = None) -> list[GroundingSample]:
    """One grounding sample per present RE attribute of every element.

    Elements with out-of-range or zero-area boxes yield nothing; use
    :func:`expand_records` to get them counted.
    """
    out = []
    for el in record.elements:
        if not _usable_target(el):
            continue
        present = el.re_fields()
        for name, task_type, _ in RE_FIELDS:
            if name in present:
                out.append(_make(record, el.element_id, task_type, present[name], el.bbox, era_cutoff))
    return out


def generate_reg_samples(record: ScreenshotRecord, era_cutoff: int | None = None) -> list[GroundingSample]:
    """Reverse tasks: the target box is the prompt, the RE is the expected answer.

    There is no intent REG.
    """
    out = []
    for el in record.elements:
        if not _usable_target(el):
            continue
        present = el.re_fields()
        for name, _, reg_type in RE_FIELDS:
            if reg_type is not None and name in present:
                out.append(_make(record, el.element_id, reg_type, present[name], el.bbox, era_cutoff))
    return out


def widget_listing_payload(boxes: Iterable[list[float]]) -> str:
    return json.dumps([list(b) for b in boxes])


def parse_widget_listing(payload: str) -> list[list[float]]:
    return json.loads(payload)


def generate_widget_listing(
    record: ScreenshotRecord, era_cutoff: int | None = None
) -> GroundingSample | None:
    # Payload is a JSON list of [x1, y1, x2, y2] in element document order.
    boxes = [el.bbox.as_list() for el in record.elements if el.visible and el.bbox.is_valid()]
    if not boxes:
        return None
    return _make(record, "", TaskType.WIDGET_LISTING, widget_listing_payload(boxes), FULL_IMAGE, era_cutoff)


@dataclass
class ExpandStats:
    n_records: int = 0
    n_elements: int = 0
    n_bad_target: int = 0
    per_task_type: dict[str, int] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return sum(self.per_task_type.values())


def expand_record(
    record: ScreenshotRecord,
    *,
    reg: bool = True,
    widget_listing: bool = True,
    era_cutoff: int | None = None,
) -> list[GroundingSample]:
    samples = generate_samples(record, era_cutoff)
    if reg:
        samples.extend(generate_reg_samples(record, era_cutoff))
    if widget_listing:
        wl = generate_widget_listing(record, era_cutoff)
        if wl is not None:
            samples.append(wl)
    return samples


def expand_records(
    records: Iterable[ScreenshotRecord],
    *,
    reg: bool = True,
    widget_listing: bool = True,
    era_cutoff: int | None = None,
) -> tuple[list[GroundingSample], ExpandStats]:
    """Expand many records; output is sorted by sample_id so shards merge deterministically."""
    stats = ExpandStats()
    out: list[GroundingSample] = []
    for rec in records:
        stats.n_records += 1
        stats.n_elements += len(rec.elements)
        stats.n_bad_target += sum(
            1 for el in rec.elements if el.re_fields() and not _usable_target(el)
        )
        out.extend(expand_record(rec, reg=reg, widget_listing=widget_listing, era_cutoff=era_cutoff))
    out.sort(key=lambda s: s.sample_id)
    for s in out:
        stats.per_task_type[s.task_type.value] = stats.per_task_type.get(s.task_type.value, 0) + 1
    return out, stats
