"""Offline GUI-agent evaluation: action matching and step success rate.

Three strategies produce a predicted action per step:

* ``two-stage``: the planner emits an action plus an intent or functionality
  description, and the grounder turns that description into a point;
* ``som``: the planner picks a numeric tag from precomputed candidate boxes;
* ``planner-only``: the planner emits coordinates itself.
"""

from __future__ import annotations

import enum
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence, TextIO

from .clients import (
    CoordScale,
    GrounderClient,
    MalformedOutput,
    PlannerClient,
    PlannerOutput,
    TransportError,
    parse_coords,
    parse_planner_output,
    to_point,
)
from .data_model import NormBBox, NormPoint, ValidationError, center, iter_jsonl
from .grounding_eval import point_in_bbox

log = logging.getLogger(__name__)

DEFAULT_F1_THRESHOLD = 0.5


class ActionKind(str, enum.Enum):
    CLICK = "click"
    LONG_PRESS = "long_press"
    INPUT_TEXT = "input_text"
    SWIPE = "swipe"
    NAVIGATE_HOME = "navigate_home"
    NAVIGATE_BACK = "navigate_back"
    OPEN_APP = "open_app"
    STATUS_COMPLETE = "status_complete"
    STATUS_IMPOSSIBLE = "status_impossible"
    WAIT = "wait"

    @property
    def needs_point(self) -> bool:
        return self in (ActionKind.CLICK, ActionKind.LONG_PRESS)

    @property
    def needs_text(self) -> bool:
        return self in (ActionKind.INPUT_TEXT, ActionKind.OPEN_APP)


class Direction(str, enum.Enum):
    UP = "up"
    DOWN = "down"
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class Action:
    """A predicted or ground-truth action.

    Not validated on construction: a failed grounding legitimately produces a
    click with no point. :meth:`is_well_formed` tells whether the parameter
    the kind requires is present and no others are.
    """

    kind: ActionKind
    point: NormPoint | None = None
    text: str | None = None
    direction: Direction | None = None

    def is_well_formed(self) -> bool:
        k = self.kind
        return (
            (self.point is not None) == k.needs_point
            and (self.text is not None) == k.needs_text
            and (self.direction is not None) == (k is ActionKind.SWIPE)
        )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Action":
        try:
            kind = ActionKind(d["kind"])
        except ValueError as exc:
            raise ValidationError(f"unknown action kind {d.get('kind')!r}") from exc
        point = d.get("point")
        direction = d.get("direction")
        action = cls(
            kind=kind,
            point=None if point is None else NormPoint(*map(float, point)),
            text=d.get("text"),
            direction=None if direction is None else Direction(direction),
        )
        return action

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind.value}
        if self.point is not None:
            d["point"] = self.point.as_list()
        if self.text is not None:
            d["text"] = self.text
        if self.direction is not None:
            d["direction"] = self.direction.value
        return d


@dataclass(frozen=True)
class AgentStep:
    step_id: str
    task_instruction: str
    image_ref: str
    gt_action: Action
    history: tuple[str, ...] = ()
    gt_bbox: NormBBox | None = None
    som_candidates: tuple[NormBBox, ...] | None = None

    def __post_init__(self) -> None:
        if (self.gt_bbox is not None) != self.gt_action.kind.needs_point:
            raise ValidationError(f"step {self.step_id}: gt_bbox must be given exactly for click/long_press")
        if self.gt_bbox is not None:
            self.gt_bbox.validate()

    @property
    def is_grounded(self) -> bool:
        return self.gt_action.kind.needs_point

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AgentStep":
        gt_bbox = d.get("gt_bbox")
        cands = d.get("som_candidates")
        return cls(
            step_id=str(d["step_id"]),
            task_instruction=str(d["task"]),
            image_ref=str(d["image"]),
            gt_action=Action.from_dict(d["gt_action"]),
            history=tuple(str(h) for h in d.get("history", [])),
            gt_bbox=None if gt_bbox is None else NormBBox.from_list(gt_bbox),
            som_candidates=None if cands is None else tuple(NormBBox.from_list(c) for c in cands),
        )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "step_id": self.step_id,
            "task": self.task_instruction,
            "image": self.image_ref,
            "history": list(self.history),
            "gt_action": self.gt_action.to_dict(),
        }
        if self.gt_bbox is not None:
            d["gt_bbox"] = self.gt_bbox.as_list()
        if self.som_candidates is not None:
            d["som_candidates"] = [c.as_list() for c in self.som_candidates]
        return d


def load_steps(fp: TextIO) -> list[AgentStep]:
    return [AgentStep.from_dict(json.loads(line)) for _, line in iter_jsonl(fp)]


def token_f1(pred: str, gt: str) -> float:
    pred_toks = pred.lower().split()
    gt_toks = gt.lower().split()
    if not pred_toks and not gt_toks:
        return 1.0
    if not pred_toks or not gt_toks:
        return 0.0
    common = sum((Counter(pred_toks) & Counter(gt_toks)).values())
    return 2 * common / (len(pred_toks) + len(gt_toks))


def match_action(pred: Action | None, step: AgentStep, f1_threshold: float = DEFAULT_F1_THRESHOLD) -> bool:
    """Whether the prediction equals the ground truth in kind and every parameter.

    Text parameters match when token F1 is strictly above the threshold.
    """
    if pred is None or pred.kind is not step.gt_action.kind or not pred.is_well_formed():
        return False
    kind = pred.kind
    if kind.needs_point:
        return point_in_bbox(pred.point, step.gt_bbox)  # type: ignore[arg-type]
    if kind.needs_text:
        return token_f1(pred.text or "", step.gt_action.text or "") > f1_threshold
    if kind is ActionKind.SWIPE:
        return pred.direction == step.gt_action.direction
    return True


def step_success_rate(results: Sequence[bool]) -> float:
    if not results:
        raise ValueError("no steps to score")
    return 100 * sum(bool(r) for r in results) / len(results)


def _compose(out: PlannerOutput, point: NormPoint | None) -> Action | None:
    try:
        kind = ActionKind(out.action_kind)
    except ValueError:
        return None
    direction = None
    if out.direction is not None:
        try:
            direction = Direction(out.direction.lower())
        except ValueError:
            return None
    return Action(
        kind=kind,
        point=point if kind.needs_point else None,
        text=out.text_param if kind.needs_text else None,
        direction=direction if kind is ActionKind.SWIPE else None,
    )


def run_two_stage(
    step: AgentStep,
    planner: PlannerClient,
    grounder: GrounderClient,
    re_mode: str = "intent",
    scale: CoordScale | str = CoordScale.THOUSAND,
) -> Action | None:
    """Planner decides the action; grounder locates its target from the intent/functionality text.

    Returns None when the planner reply is unusable. A grounding failure
    yields a click/long-press without a point, which never matches.
    """
    if re_mode not in ("intent", "functionality"):
        raise ValueError(f"re_mode must be intent or functionality, got {re_mode!r}")
    mode = f"two-stage-{re_mode}"
    raw = planner.plan(step.task_instruction, step.image_ref, step.history, mode)
    try:
        out = parse_planner_output(raw, mode, scale)
    except MalformedOutput as exc:
        log.debug("step %s: %s", step.step_id, exc)
        return None
    point = None
    if out.action_kind in ("click", "long_press"):
        re_text = out.intent_text if re_mode == "intent" else out.functionality_text
        try:
            point = to_point(parse_coords(grounder.ground(step.image_ref, re_text or ""), scale))
        except (TransportError, MalformedOutput) as exc:
            log.debug("step %s: grounding failed: %s", step.step_id, exc)
    return _compose(out, point)


def run_som(step: AgentStep, planner: PlannerClient, scale: CoordScale | str = CoordScale.THOUSAND) -> Action | None:
    """Planner chooses a 1-based tag among the step's candidate boxes; the click lands on its center."""
    if step.som_candidates is None:
        raise ValidationError(f"step {step.step_id} has no SoM candidates")
    raw = planner.plan(step.task_instruction, step.image_ref, step.history, "som", step.som_candidates)
    try:
        out = parse_planner_output(raw, "som", scale)
    except MalformedOutput:
        return None
    point = None
    if out.action_kind in ("click", "long_press"):
        tag = out.som_tag
        if tag is None or not 1 <= tag <= len(step.som_candidates):
            return Action(ActionKind(out.action_kind))
        point = center(step.som_candidates[tag - 1])
    return _compose(out, point)


def run_planner_only(step: AgentStep, planner: PlannerClient, scale: CoordScale | str = CoordScale.THOUSAND) -> Action | None:
    raw = planner.plan(step.task_instruction, step.image_ref, step.history, "planner-only")
    try:
        out = parse_planner_output(raw, "planner-only", scale)
    except MalformedOutput:
        return None
    return _compose(out, out.point)


STRATEGIES = ("two-stage", "som", "planner-only")


@dataclass
class StepOutcome:
    step_id: str
    gt_kind: str
    grounded: bool
    success: bool
    predicted: dict[str, Any] | None
    status: str  # "ok", "malformed" or "error"
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class AgentReport:
    outcomes: list[StepOutcome]
    f1_threshold: float
    strategy: str
    per_kind: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.outcomes)

    @property
    def step_sr(self) -> float:
        return step_success_rate([o.success for o in self.outcomes])

    @property
    def grounded_fraction(self) -> float:
        return 100 * sum(o.grounded for o in self.outcomes) / self.n_steps

    @property
    def grounding_accuracy(self) -> float | None:
        grounded = [o.success for o in self.outcomes if o.grounded]
        return step_success_rate(grounded) if grounded else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy,
            "f1_threshold": self.f1_threshold,
            "n_steps": self.n_steps,
            "step_sr": self.step_sr,
            "grounded_step_percent": self.grounded_fraction,
            "grounding_accuracy": self.grounding_accuracy,
            "n_malformed": sum(o.status == "malformed" for o in self.outcomes),
            "n_errors": sum(o.status == "error" for o in self.outcomes),
            "per_kind": self.per_kind,
            "steps": [o.to_dict() for o in self.outcomes],
        }


def predict_step(
    step: AgentStep,
    strategy: str,
    planner: PlannerClient,
    grounder: GrounderClient | None = None,
    re_mode: str = "intent",
    scale: CoordScale | str = CoordScale.THOUSAND,
) -> Action | None:
    if strategy == "two-stage":
        if grounder is None:
            raise ValueError("two-stage strategy needs a grounder")
        return run_two_stage(step, planner, grounder, re_mode, scale)
    if strategy == "som":
        return run_som(step, planner, scale)
    if strategy == "planner-only":
        return run_planner_only(step, planner, scale)
    raise ValueError(f"unknown strategy {strategy!r}")


def eval_trajectories(
    steps: Sequence[AgentStep],
    strategy: str,
    planner: PlannerClient,
    grounder: GrounderClient | None = None,
    *,
    re_mode: str = "intent",
    f1_threshold: float = DEFAULT_F1_THRESHOLD,
    workers: int = 1,
    scale: CoordScale | str = CoordScale.THOUSAND,
) -> AgentReport:
    if not steps:
        raise ValueError("no steps to evaluate")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")

    def one(step: AgentStep) -> StepOutcome:
        base = dict(step_id=step.step_id, gt_kind=step.gt_action.kind.value, grounded=step.is_grounded)
        try:
            pred = predict_step(step, strategy, planner, grounder, re_mode, scale)
        except (TransportError, ValidationError) as exc:
            return StepOutcome(**base, success=False, predicted=None, status="error", error=str(exc))
        malformed = pred is None or not pred.is_well_formed()
        return StepOutcome(
            **base,
            success=match_action(pred, step, f1_threshold),
            predicted=None if pred is None else pred.to_dict(),
            status="malformed" if malformed else "ok",
        )

    if workers <= 1:
        outcomes = [one(s) for s in steps]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, steps))

    per_kind: dict[str, dict[str, float]] = {}
    for o in outcomes:
        entry = per_kind.setdefault(o.gt_kind, {"n_steps": 0, "n_success": 0})
        entry["n_steps"] += 1
        entry["n_success"] += int(o.success)
    for entry in per_kind.values():
        entry["step_sr"] = 100 * entry["n_success"] / entry["n_steps"]
    return AgentReport(outcomes, f1_threshold, strategy, dict(sorted(per_kind.items())))
