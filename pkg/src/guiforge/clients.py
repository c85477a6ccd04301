"""Planner and grounder endpoint clients, output parsers, and test doubles."""

from __future__ import annotations

import base64
import enum
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx

from .data_model import NormBBox, NormPoint, center

log = logging.getLogger(__name__)

GROUNDED_KINDS = frozenset({"click", "long_press"})
RETRY_STATUSES = frozenset({408, 425, 429, 500, 502, 503, 504})


class TransportError(RuntimeError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class MalformedOutput(ValueError):
    """Model output could not be turned into a structured answer."""


class GrounderClient(Protocol):
    def ground(self, image_ref: str, re_text: str) -> str: ...


class PlannerClient(Protocol):
    def plan(
        self,
        task: str,
        image_ref: str,
        history: Sequence[str],
        mode: str,
        candidates: Sequence[NormBBox] | None = None,
    ) -> str: ...


# ---------------------------------------------------------------------------
# coordinate text


class CoordScale(str, enum.Enum):
    """How to read coordinates greater than 1 emitted by a model."""

    THOUSAND = "thousand"  # 0-1000 grid (Qwen-VL style)
    PERCENT = "percent"  # 0-100

    @property
    def divisor(self) -> float:
        return 1000.0 if self is CoordScale.THOUSAND else 100.0


_NUM = r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?"
_GROUP = re.compile(r"[\(\[]\s*([^\(\)\[\]]*?)\s*[\)\]]")
_NUM_RE = re.compile(_NUM)


def _numbers(text: str) -> list[float]:
    return [float(m) for m in _NUM_RE.findall(text)]


def parse_coords(raw: str, scale: CoordScale | str = CoordScale.THOUSAND) -> NormPoint | NormBBox:
    """Read a point or box out of model text.

    Accepted shapes: ``(x, y)``, ``x, y``, ``[x1, y1, x2, y2]`` and the
    two-point form ``(x1, y1), (x2, y2)``. If every value is <= 1 the text is
    taken as normalized, otherwise everything is divided by ``scale``.
    Raises :class:`MalformedOutput` when nothing usable is found.
    """
    scale = CoordScale(scale)
    values: list[float] | None = None
    groups = [_numbers(g) for g in _GROUP.findall(raw)]
    groups = [g for g in groups if g]
    if groups:
        if len(groups[0]) == 4:
            values = groups[0]
        elif len(groups[0]) == 2:
            values = groups[0] + groups[1] if len(groups) > 1 and len(groups[1]) == 2 else groups[0]
    if values is None:
        nums = _numbers(raw)
        if len(nums) in (2, 4):
            values = nums
    if values is None:
        raise MalformedOutput(f"no coordinate tuple in {raw[:80]!r}")
    if any(v > 1.0 for v in values):
        values = [v / scale.divisor for v in values]
    if len(values) == 2:
        point = NormPoint(*values)
        if not point.is_valid():
            raise MalformedOutput(f"point out of range: {values}")
        return point
    box = NormBBox(*values)
    if not box.is_valid():
        raise MalformedOutput(f"box out of range: {values}")
    return box


def to_point(coords: NormPoint | NormBBox) -> NormPoint:
    return center(coords) if isinstance(coords, NormBBox) else coords


def format_point(p: NormPoint) -> str:
    return f"({p.x:.6f}, {p.y:.6f})"


def format_box(b: NormBBox) -> str:
    return "[" + ", ".join(f"{v:.6f}" for v in b.as_list()) + "]"


# ---------------------------------------------------------------------------
# planner output


@dataclass(frozen=True)
class PlannerOutput:
    action_kind: str
    intent_text: str | None = None
    functionality_text: str | None = None
    text_param: str | None = None
    direction: str | None = None
    som_tag: int | None = None
    point: NormPoint | None = None


PLANNER_MODES = ("two-stage-intent", "two-stage-functionality", "som", "planner-only")

_KIND_ALIASES = {
    "tap": "click",
    "type": "input_text",
    "input": "input_text",
    "longpress": "long_press",
    "long-press": "long_press",
    "scroll": "swipe",
    "home": "navigate_home",
    "back": "navigate_back",
    "press_home": "navigate_home",
    "press_back": "navigate_back",
    "complete": "status_complete",
    "impossible": "status_impossible",
}


def _json_blocks(raw: str):
    dec = json.JSONDecoder()
    i = raw.find("{")
    while i != -1:
        try:
            obj, _ = dec.raw_decode(raw, i)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            yield obj
        i = raw.find("{", i + 1)


def _opt(d: Mapping[str, Any], *keys: str) -> str | None:
    for k in keys:
        v = d.get(k)
        if v is not None and str(v).strip():
            return str(v)
    return None


def parse_planner_output(raw: str, mode: str, scale: CoordScale | str = CoordScale.THOUSAND) -> PlannerOutput:
    """Pull the first JSON object with an ``action`` key out of a planner reply.

    Text around the block is ignored. A grounded action (click/long-press)
    must carry what ``mode`` needs: an intent, a functionality description,
    a SoM tag, or (planner-only) a point.
    """
    if mode not in PLANNER_MODES:
        raise ValueError(f"unknown planner mode {mode!r}")
    block = next((b for b in _json_blocks(raw) if "action" in b), None)
    if block is None:
        raise MalformedOutput("no JSON action block in planner output")
    kind = str(block["action"]).strip().lower()
    kind = _KIND_ALIASES.get(kind, kind)
    tag = block.get("tag", block.get("som_tag"))
    point = None
    if block.get("point") is not None:
        try:
            point = to_point(parse_coords(json.dumps(block["point"]), scale))
        except MalformedOutput:
            point = None
    try:
        som_tag = None if tag is None else int(tag)
    except (TypeError, ValueError) as exc:
        raise MalformedOutput(f"non-integer SoM tag {tag!r}") from exc
    out = PlannerOutput(
        action_kind=kind,
        intent_text=_opt(block, "intent", "action_intent"),
        functionality_text=_opt(block, "functionality", "functionality_description"),
        text_param=_opt(block, "text"),
        direction=_opt(block, "direction"),
        som_tag=som_tag,
        point=point,
    )
    if kind in GROUNDED_KINDS:
        needed = {
            "two-stage-intent": out.intent_text,
            "two-stage-functionality": out.functionality_text,
            "som": out.som_tag,
            "planner-only": out.point,
        }[mode]
        if needed is None:
            raise MalformedOutput(f"{kind} without the grounding field required by mode {mode}")
    return out


# ---------------------------------------------------------------------------
# HTTP


@dataclass
class ClientConfig:
    url: str
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.5  # seconds before the first retry; doubles each time
    token: str | None = None
    image_mode: str = "base64"  # or "uri"

    @classmethod
    def from_env(cls, kind: str, **overrides: Any) -> "ClientConfig":
        env_url = os.environ.get(f"FORGE_{kind.upper()}_URL")
        url = overrides.pop("url", None) or env_url
        if not url:
            raise ValueError(f"no {kind} URL configured (flag or FORGE_{kind.upper()}_URL)")
        token = overrides.pop("token", None) or os.environ.get("FORGE_API_TOKEN")
        return cls(url=url, token=token, **{k: v for k, v in overrides.items() if v is not None})


def encode_image(image_ref: str, mode: str) -> str:
    if mode == "uri" or re.match(r"^[a-z][a-z0-9+.-]*://", image_ref):
        return image_ref
    with open(image_ref, "rb") as fp:
        return base64.b64encode(fp.read()).decode("ascii")


class HttpClient:
    """JSON POST with retry and exponential backoff; returns the ``text`` field."""

    def __init__(self, config: ClientConfig, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {config.token}"} if config.token else {}
        self._http = httpx.Client(timeout=config.timeout, headers=headers)

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def post(self, payload: Mapping[str, Any]) -> str:
        cfg = self.config
        attempts = cfg.retries + 1
        last: TransportError | None = None
        for attempt in range(attempts):
            if attempt:
                self._sleep(cfg.backoff * 2 ** (attempt - 1))
            try:
                resp = self._http.post(cfg.url, json=payload)
            except httpx.TimeoutException as exc:
                last = TransportError(f"timeout after {cfg.timeout}s: {exc}")
                continue
            except httpx.TransportError as exc:
                last = TransportError(f"transport failure: {exc}")
                continue
            if resp.is_success:
                try:
                    return str(resp.json()["text"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise TransportError(f"bad response body: {exc}", resp.status_code) from exc
            last = TransportError(f"HTTP {resp.status_code} from {cfg.url}", resp.status_code)
            if resp.status_code not in RETRY_STATUSES:
                break
        assert last is not None
        raise last


class HttpGrounder(HttpClient):
    def ground(self, image_ref: str, re_text: str) -> str:
        return self.post({"image": encode_image(image_ref, self.config.image_mode), "prompt": re_text})


class HttpPlanner(HttpClient):
    def plan(self, task, image_ref, history, mode, candidates=None):
        payload: dict[str, Any] = {
            "image": encode_image(image_ref, self.config.image_mode),
            "prompt": task,
            "task": task,
            "history": list(history),
            "mode": mode,
        }
        if candidates is not None:
            payload["candidates"] = [
                {"tag": i, "bbox": b.as_list()} for i, b in enumerate(candidates, start=1)
            ]
        return self.post(payload)


def http_client(config: ClientConfig, kind: str = "grounder") -> HttpGrounder | HttpPlanner:
    if kind == "grounder":
        return HttpGrounder(config)
    if kind == "planner":
        return HttpPlanner(config)
    raise ValueError(f"unknown client kind {kind!r}")


# ---------------------------------------------------------------------------
# in-process doubles


class OracleGrounder:
    """Answers with the center of the known target box; ``miss`` for unknown queries."""

    def __init__(self, answer_key: Mapping[tuple[str, str], NormBBox], miss: NormPoint = NormPoint(0.0, 0.0)):
        self.answer_key = dict(answer_key)
        self.miss = miss
        self._lock = threading.Lock()
        self.calls: list[tuple[str, str]] = []

    @classmethod
    def from_benchmark(cls, samples, **kw) -> "OracleGrounder":
        return cls({(s.image_ref, s.prompt): s.gt_bbox for s in samples}, **kw)

    def ground(self, image_ref: str, re_text: str) -> str:
        with self._lock:
            self.calls.append((image_ref, re_text))
        box = self.answer_key.get((image_ref, re_text))
        return format_point(self.miss if box is None else center(box))


class ScriptedPlanner:
    """Replays canned raw replies keyed by image reference."""

    def __init__(self, replies: Mapping[str, str], default: str = "no idea"):
        self.replies = dict(replies)
        self.default = default
        self._lock = threading.Lock()
        self.calls: list[dict[str, Any]] = []

    def plan(self, task, image_ref, history, mode, candidates=None):
        with self._lock:
            self.calls.append(
                {"task": task, "image": image_ref, "history": list(history), "mode": mode, "candidates": candidates}
            )
        return self.replies.get(image_ref, self.default)
