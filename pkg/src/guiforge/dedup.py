"""Redundancy removal: discretize boxes, clean REs, group, keep one per group."""

from __future__ import annotations

import hashlib
import random
import unicodedata
from collections import defaultdict
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable

from .data_model import GroundingSample, NormBBox, TaskType

GRID = 100


def round_half_away(value: Decimal) -> int:
    # ROUND_HALF_UP in decimal rounds ties away from zero.
    return int(value.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def discretize_coord(c: float) -> int:
    # Decimal(repr) so 0.105 rounds as the literal it was written as, not as
    # the binary float just below it.
    v = round_half_away(Decimal(repr(float(c))) * GRID)
    return min(GRID, max(0, v))


def discretize_bbox(b: NormBBox) -> tuple[int, int, int, int]:
    b.validate()
    return tuple(discretize_coord(c) for c in b.as_list())  # type: ignore[return-value]


def clean_re(s: str) -> str:
    """Drop Unicode punctuation, lowercase, collapse whitespace."""
    no_punct = "".join(ch for ch in s if not unicodedata.category(ch).startswith("P"))
    return " ".join(no_punct.lower().split())


@dataclass(frozen=True, order=True)
class DedupKey:
    dbox: tuple[int, int, int, int]
    cleaned_re: str
    task_type: TaskType

    @classmethod
    def of(cls, s: GroundingSample) -> "DedupKey":
        return cls(discretize_bbox(s.target_bbox), clean_re(s.re_text), s.task_type)

    def digest(self) -> str:
        raw = "\x1f".join((",".join(map(str, self.dbox)), self.cleaned_re, self.task_type.value))
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()


@dataclass
class DedupStats:
    n_input: int
    groups: int
    kept: int
    dropped: int

    def to_dict(self) -> dict:
        return {"n_input": self.n_input, "groups": self.groups, "kept": self.kept, "dropped": self.dropped}


def _pick(members: list[GroundingSample], key: DedupKey, seed: int) -> GroundingSample:
    # Per-group RNG keyed by (seed, key) makes the choice independent of input
    # order and of how groups are sharded across workers.
    if len(members) == 1:
        return members[0]
    members = sorted(members, key=lambda s: s.sample_id)
    rng = random.Random(f"{seed}:{key.digest()}")
    return members[rng.randrange(len(members))]


def group_samples(samples: Iterable[GroundingSample]) -> dict[DedupKey, list[GroundingSample]]:
    groups: dict[DedupKey, list[GroundingSample]] = defaultdict(list)
    for s in samples:
        groups[DedupKey.of(s)].append(s)
    return groups


def dedup_samples(samples: Iterable[GroundingSample], seed: int = 0) -> tuple[list[GroundingSample], DedupStats]:
    samples = list(samples)
    groups = group_samples(samples)
    kept = [_pick(members, key, seed) for key, members in groups.items()]
    kept.sort(key=lambda s: s.sample_id)
    stats = DedupStats(n_input=len(samples), groups=len(groups), kept=len(kept), dropped=len(samples) - len(kept))
    return kept, stats
