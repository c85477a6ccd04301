"""Element-level denoising of screenshot records before sample generation.

Three independent drop rules: blank/invisible elements, boxes outside the
image, and plain-text elements whose rendered text disagrees with their
alt-text according to a :class:`TextRecognizer`.
"""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
import threading
from dataclasses import dataclass, fields
from typing import Protocol, Sequence

from rapidfuzz.distance import Levenshtein

from .data_model import GuiElement, ScreenshotRecord, to_pixel
from .dedup import clean_re

log = logging.getLogger(__name__)

DEFAULT_OCR_THRESHOLD = 0.8

# Categories treated as plain text for the OCR rule (compared lowercase).
TEXT_CATEGORIES = frozenset(
    {"text", "statictext", "textview", "label", "paragraph", "heading", "span", "p", "h1", "h2", "h3", "h4", "h5", "h6"}
)


@dataclass
class DenoiseStats:
    n_blank_invisible: int = 0
    n_invalid_bbox: int = 0
    n_ocr_mismatch: int = 0
    n_kept: int = 0
    n_ocr_unavailable: int = 0  # informational, already inside n_kept

    @property
    def n_dropped(self) -> int:
        return self.n_blank_invisible + self.n_invalid_bbox + self.n_ocr_mismatch

    @property
    def n_input(self) -> int:
        return self.n_kept + self.n_dropped

    def __add__(self, other: "DenoiseStats") -> "DenoiseStats":
        return DenoiseStats(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def to_dict(self) -> dict[str, int]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["n_input"] = self.n_input
        return d


class TextRecognizer(Protocol):
    """Returns the text drawn inside ``box_px`` of ``image_ref``, or None when unavailable."""

    thread_safe: bool

    def recognize(self, image_ref: str, box_px: Sequence[float]) -> str | None: ...


class NullRecognizer:
    thread_safe = True

    def recognize(self, image_ref, box_px):
        return None


class OracleRecognizer:
    """Exact-match stand-in for OCR: answers with the element's ``rendered_text``.

    Lookups are keyed by image and integer-rounded pixel box.
    """

    thread_safe = True

    def __init__(self, records: Sequence[ScreenshotRecord] = ()):
        self._table: dict[tuple[str, tuple[int, ...]], str | None] = {}
        for rec in records:
            self.add(rec)

    @staticmethod
    def _key(image_ref: str, box_px: Sequence[float]) -> tuple[str, tuple[int, ...]]:
        return image_ref, tuple(round(v) for v in box_px)

    def add(self, record: ScreenshotRecord) -> None:
        for el in record.elements:
            if el.bbox.is_valid():
                box = to_pixel(el.bbox, record.width_px, record.height_px)
                self._table[self._key(record.image_ref, box)] = el.rendered_text

    def recognize(self, image_ref, box_px):
        return self._table.get(self._key(image_ref, box_px))


class ExternalRecognizer:
    """Line-delimited JSON over a subprocess pipe.

    Each request is ``{"image": ..., "bbox_px": [...]}`` and the process must
    answer one ``{"text": ...}`` line (``null`` text means unavailable).
    Calls are serialized with a lock.
    """

    thread_safe = False

    def __init__(self, command: str | Sequence[str]):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self._proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
        )
        self._lock = threading.Lock()

    def recognize(self, image_ref, box_px):
        req = json.dumps({"image": image_ref, "bbox_px": list(box_px)})
        with self._lock:
            assert self._proc.stdin is not None and self._proc.stdout is not None
            self._proc.stdin.write(req + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError("external recognizer closed its output")
        text = json.loads(line).get("text")
        return None if text is None else str(text)

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()  # type: ignore[union-attr]
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def text_similarity(a: str, b: str) -> float:
    """1 - Levenshtein / max length, on cleaned strings; 1.0 when both are empty."""
    a, b = clean_re(a), clean_re(b)
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - Levenshtein.distance(a, b) / longest


def is_blank(el: GuiElement) -> bool:
    return not el.re_fields()


def is_plain_text(el: GuiElement) -> bool:
    return (
        el.category is not None
        and el.category.strip().lower() in TEXT_CATEGORIES
        and bool(el.alt_text and el.alt_text.strip())
    )


def filter_blank_invisible(record: ScreenshotRecord) -> tuple[ScreenshotRecord, DenoiseStats]:
    kept = [el for el in record.elements if el.visible and not is_blank(el)]
    stats = DenoiseStats(n_blank_invisible=len(record.elements) - len(kept), n_kept=len(kept))
    return record.with_elements(kept), stats


def filter_invalid_bbox(record: ScreenshotRecord) -> tuple[ScreenshotRecord, DenoiseStats]:
    kept = [el for el in record.elements if el.bbox.is_valid() and not el.bbox.is_degenerate()]
    stats = DenoiseStats(n_invalid_bbox=len(record.elements) - len(kept), n_kept=len(kept))
    return record.with_elements(kept), stats


def filter_ocr_mismatch(
    record: ScreenshotRecord,
    recognizer: TextRecognizer,
    threshold: float = DEFAULT_OCR_THRESHOLD,
) -> tuple[ScreenshotRecord, DenoiseStats]:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    kept = []
    stats = DenoiseStats()
    for el in record.elements:
        if not is_plain_text(el) or not el.bbox.is_valid():
            kept.append(el)
            continue
        try:
            recognized = recognizer.recognize(
                record.image_ref, to_pixel(el.bbox, record.width_px, record.height_px)
            )
        except Exception as exc:  # adapter faults must not abort a record
            log.warning("recognizer failed on %s/%s: %s", record.record_id, el.element_id, exc)
            recognized = None
        if recognized is None:
            stats.n_ocr_unavailable += 1
            kept.append(el)
        elif text_similarity(el.alt_text or "", recognized) < threshold:
            stats.n_ocr_mismatch += 1
        else:
            kept.append(el)
    stats.n_kept = len(kept)
    return record.with_elements(kept), stats


def denoise_record(
    record: ScreenshotRecord,
    recognizer: TextRecognizer | None = None,
    threshold: float = DEFAULT_OCR_THRESHOLD,
) -> tuple[ScreenshotRecord, DenoiseStats]:
    """Apply all three rules; stats attribute each dropped element to the first rule that removed it."""
    n_in = len(record.elements)
    record, s1 = filter_blank_invisible(record)
    record, s2 = filter_invalid_bbox(record)
    stats = DenoiseStats(n_blank_invisible=s1.n_blank_invisible, n_invalid_bbox=s2.n_invalid_bbox)
    if recognizer is not None:
        record, s3 = filter_ocr_mismatch(record, recognizer, threshold)
        stats.n_ocr_mismatch = s3.n_ocr_mismatch
        stats.n_ocr_unavailable = s3.n_ocr_unavailable
    stats.n_kept = len(record.elements)
    assert stats.n_input == n_in
    return record, stats
