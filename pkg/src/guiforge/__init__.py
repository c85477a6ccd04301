"""Curation and evaluation toolkit for GUI element grounding data and models."""

__version__ = "0.1.0"

from .data_model import (  # noqa: E402
    EvalReport,
    GroundingSample,
    GuiElement,
    NormBBox,
    NormPoint,
    ScreenshotRecord,
    TaskType,
    ValidationError,
    center,
    to_pixel,
)

__all__ = [
    "EvalReport",
    "GroundingSample",
    "GuiElement",
    "NormBBox",
    "NormPoint",
    "ScreenshotRecord",
    "TaskType",
    "ValidationError",
    "center",
    "to_pixel",
]
