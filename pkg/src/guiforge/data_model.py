"""Shared domain types, coordinate conventions and the JSONL schema.

All coordinates inside the toolkit are normalized fractions of the image
width/height. Pixel coordinates only appear at I/O boundaries (OCR adapters,
converters), via :func:`to_pixel` and :meth:`NormBBox.from_pixels`.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, TextIO


class ValidationError(ValueError):
    """Raised when a value violates a domain invariant."""


@dataclass(frozen=True)
class NormPoint:
    x: float
    y: float

    def is_valid(self) -> bool:
        return 0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0

    def as_list(self) -> list[float]:
        return [self.x, self.y]


@dataclass(frozen=True)
class NormBBox:
    """Box as [x_topleft, y_topleft, x_bottomright, y_bottomright] fractions.

    Construction never validates: raw GUI metadata contains broken boxes and
    the denoiser needs to see them. Call :meth:`validate` at the boundaries
    that require a valid box.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def from_list(cls, values: Iterable[float]) -> "NormBBox":
        vals = [float(v) for v in values]
        if len(vals) != 4:
            raise ValidationError(f"bbox needs 4 values, got {len(vals)}")
        return cls(*vals)

    @classmethod
    def from_pixels(cls, px: Iterable[float], width: int, height: int) -> "NormBBox":
        if width <= 0 or height <= 0:
            raise ValidationError(f"image dims must be positive, got {width}x{height}")
        x1, y1, x2, y2 = (float(v) for v in px)
        return cls(x1 / width, y1 / height, x2 / width, y2 / height)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def is_valid(self) -> bool:
        coords = self.as_list()
        if not all(math.isfinite(c) and 0.0 <= c <= 1.0 for c in coords):
            return False
        return self.x1 <= self.x2 and self.y1 <= self.y2

    def is_degenerate(self) -> bool:
        return self.x1 == self.x2 or self.y1 == self.y2

    def validate(self) -> "NormBBox":
        if not self.is_valid():
            raise ValidationError(f"invalid normalized bbox {self.as_list()}")
        return self

    @property
    def area(self) -> float:
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)


FULL_IMAGE = NormBBox(0.0, 0.0, 1.0, 1.0)


def to_pixel(b: NormBBox, w: int, h: int) -> list[float]:
    """Scale a normalized box to pixel coordinates of a ``w`` x ``h`` image."""
    b.validate()
    if w <= 0 or h <= 0:
        raise ValidationError(f"image dims must be positive, got {w}x{h}")
    return [b.x1 * w, b.y1 * h, b.x2 * w, b.y2 * h]


def center(b: NormBBox) -> NormPoint:
    b.validate()
    return NormPoint((b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2)


class Platform(str, enum.Enum):
    WEB = "web"
    MOBILE = "mobile"
    DESKTOP = "desktop"


class TaskType(str, enum.Enum):
    TEXT_GROUNDING = "TextGrounding"
    BRIEF_DESC_GROUNDING = "BriefDescGrounding"
    INTENT_GROUNDING = "IntentGrounding"
    FUNCTIONALITY_GROUNDING = "FunctionalityGrounding"
    TEXT_REG = "TextREG"
    BRIEF_DESC_REG = "BriefDescREG"
    FUNCTIONALITY_REG = "FunctionalityREG"
    WIDGET_LISTING = "WidgetListing"

    @property
    def is_reg(self) -> bool:
        return self in REG_TYPES

    @property
    def is_grounding(self) -> bool:
        return self in GROUNDING_TYPES


GROUNDING_TYPES = frozenset(
    {
        TaskType.TEXT_GROUNDING,
        TaskType.BRIEF_DESC_GROUNDING,
        TaskType.INTENT_GROUNDING,
        TaskType.FUNCTIONALITY_GROUNDING,
    }
)
REG_TYPES = frozenset({TaskType.TEXT_REG, TaskType.BRIEF_DESC_REG, TaskType.FUNCTIONALITY_REG})

# Element attribute holding the referring expression for each grounding task,
# in generation order. Intent grounding has no REG counterpart.
RE_FIELDS: tuple[tuple[str, TaskType, TaskType | None], ...] = (
    ("alt_text", TaskType.TEXT_GROUNDING, TaskType.TEXT_REG),
    ("brief_description", TaskType.BRIEF_DESC_GROUNDING, TaskType.BRIEF_DESC_REG),
    ("action_intent", TaskType.INTENT_GROUNDING, None),
    ("functionality", TaskType.FUNCTIONALITY_GROUNDING, TaskType.FUNCTIONALITY_REG),
)


def _opt_str(v: Any) -> str | None:
    return None if v is None else str(v)


@dataclass(frozen=True)
class GuiElement:
    element_id: str
    bbox: NormBBox
    visible: bool = True
    alt_text: str | None = None
    rendered_text: str | None = None
    category: str | None = None
    brief_description: str | None = None
    action_intent: str | None = None
    functionality: str | None = None
    extra: dict[str, Any] = field(default_factory=dict, hash=False)

    _KEYS = (
        "id",
        "bbox",
        "visible",
        "alt_text",
        "rendered_text",
        "category",
        "brief_description",
        "action_intent",
        "functionality",
    )

    def re_fields(self) -> dict[str, str]:
        """Non-empty referring-expression attributes keyed by field name."""
        out = {}
        for name, _, _ in RE_FIELDS:
            value = getattr(self, name)
            if value is not None and value.strip():
                out[name] = value
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GuiElement":
        if "id" not in d or "bbox" not in d:
            raise ValidationError("element requires 'id' and 'bbox'")
        return cls(
            element_id=str(d["id"]),
            bbox=NormBBox.from_list(d["bbox"]),
            visible=bool(d.get("visible", True)),
            alt_text=_opt_str(d.get("alt_text")),
            rendered_text=_opt_str(d.get("rendered_text")),
            category=_opt_str(d.get("category")),
            brief_description=_opt_str(d.get("brief_description")),
            action_intent=_opt_str(d.get("action_intent")),
            functionality=_opt_str(d.get("functionality")),
            extra={k: v for k, v in d.items() if k not in cls._KEYS},
        )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "id": self.element_id,
            "bbox": self.bbox.as_list(),
            "visible": self.visible,
            "alt_text": self.alt_text,
            "rendered_text": self.rendered_text,
            "category": self.category,
            "brief_description": self.brief_description,
            "action_intent": self.action_intent,
            "functionality": self.functionality,
        }
        d.update(self.extra)
        return d


@dataclass(frozen=True)
class ScreenshotRecord:
    record_id: str
    image_ref: str
    width_px: int
    height_px: int
    source: str
    platform: Platform
    elements: tuple[GuiElement, ...] = ()
    gui_era: int | None = None
    extra: dict[str, Any] = field(default_factory=dict, hash=False)

    _KEYS = ("record_id", "image", "width", "height", "source", "platform", "era", "elements")

    def __post_init__(self) -> None:
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValidationError(
                f"record {self.record_id}: non-positive dims {self.width_px}x{self.height_px}"
            )
        ids = [e.element_id for e in self.elements]
        if len(ids) != len(set(ids)):
            raise ValidationError(f"record {self.record_id}: duplicate element ids")
        if not isinstance(self.elements, tuple):
            object.__setattr__(self, "elements", tuple(self.elements))

    def with_elements(self, elements: Iterable[GuiElement]) -> "ScreenshotRecord":
        return ScreenshotRecord(
            record_id=self.record_id,
            image_ref=self.image_ref,
            width_px=self.width_px,
            height_px=self.height_px,
            source=self.source,
            platform=self.platform,
            elements=tuple(elements),
            gui_era=self.gui_era,
            extra=self.extra,
        )

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScreenshotRecord":
        missing = [k for k in ("record_id", "image", "width", "height") if k not in d]
        if missing:
            raise ValidationError(f"record missing keys {missing}")
        try:
            platform = Platform(d.get("platform", "web"))
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc
        era = d.get("era")
        return cls(
            record_id=str(d["record_id"]),
            image_ref=str(d["image"]),
            width_px=int(d["width"]),
            height_px=int(d["height"]),
            source=str(d.get("source", "")),
            platform=platform,
            elements=tuple(GuiElement.from_dict(e) for e in d.get("elements", [])),
            gui_era=None if era is None else int(era),
            extra={k: v for k, v in d.items() if k not in cls._KEYS},
        )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "record_id": self.record_id,
            "image": self.image_ref,
            "width": self.width_px,
            "height": self.height_px,
            "source": self.source,
            "platform": self.platform.value,
            "era": self.gui_era,
            "elements": [e.to_dict() for e in self.elements],
        }
        d.update(self.extra)
        return d


@dataclass(frozen=True)
class GroundingSample:
    sample_id: str
    record_id: str
    image_ref: str
    task_type: TaskType
    re_text: str
    target_bbox: NormBBox
    source: str
    era_flag: bool = False
    extra: dict[str, Any] = field(default_factory=dict, hash=False)

    _KEYS = ("sample_id", "record_id", "image", "task_type", "re", "bbox", "source", "era_flag")

    def __post_init__(self) -> None:
        if not isinstance(self.task_type, TaskType):
            object.__setattr__(self, "task_type", TaskType(self.task_type))
        if self.task_type.is_grounding and not self.re_text:
            raise ValidationError(f"sample {self.sample_id}: empty referring expression")
        self.target_bbox.validate()

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GroundingSample":
        try:
            return cls(
                sample_id=str(d["sample_id"]),
                record_id=str(d["record_id"]),
                image_ref=str(d["image"]),
                task_type=TaskType(d["task_type"]),
                re_text=str(d["re"]),
                target_bbox=NormBBox.from_list(d["bbox"]),
                source=str(d.get("source", "")),
                era_flag=bool(d.get("era_flag", False)),
                extra={k: v for k, v in d.items() if k not in cls._KEYS},
            )
        except KeyError as exc:
            raise ValidationError(f"sample missing key {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "sample_id": self.sample_id,
            "record_id": self.record_id,
            "image": self.image_ref,
            "task_type": self.task_type.value,
            "re": self.re_text,
            "bbox": self.target_bbox.as_list(),
            "source": self.source,
            "era_flag": self.era_flag,
        }
        d.update(self.extra)
        return d


@dataclass
class EvalReport:
    benchmark: str
    n_samples: int
    n_correct: int
    per_split: dict[str, dict[str, Any]] = field(default_factory=dict)
    n_unparseable: int = 0
    n_failed: int = 0

    @property
    def accuracy_percent(self) -> float:
        if self.n_samples == 0:
            return 0.0
        return 100 * self.n_correct / self.n_samples

    def to_dict(self) -> dict[str, Any]:
        return {
            "benchmark": self.benchmark,
            "n_samples": self.n_samples,
            "n_correct": self.n_correct,
            "accuracy_percent": self.accuracy_percent,
            "n_unparseable": self.n_unparseable,
            "n_failed": self.n_failed,
            "per_split": self.per_split,
        }


def iter_jsonl(fp: TextIO) -> Iterator[tuple[int, str]]:
    """Yield (line number, stripped line) for non-blank lines."""
    for lineno, line in enumerate(fp, start=1):
        line = line.strip()
        if line:
            yield lineno, line


def dump_jsonl(objs: Iterable[Any], fp: TextIO) -> int:
    n = 0
    for obj in objs:
        d = obj.to_dict() if hasattr(obj, "to_dict") else obj
        fp.write(json.dumps(d, ensure_ascii=False, sort_keys=False))
        fp.write("\n")
        n += 1
    return n


def read_samples(fp: TextIO) -> list[GroundingSample]:
    return [GroundingSample.from_dict(json.loads(line)) for _, line in iter_jsonl(fp)]


def read_records(fp: TextIO) -> list[ScreenshotRecord]:
    return [ScreenshotRecord.from_dict(json.loads(line)) for _, line in iter_jsonl(fp)]
