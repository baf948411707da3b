"""Age-tracing curriculum: anchor selection and per-step training sets."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

logger = logging.getLogger(__name__)

MODES = ("bi", "mono_past", "mono_future")


def select_anchor(years, label_year: int) -> int:
    """Index of the map year closest to ``label_year``; ties go to the earlier year."""
    years = list(years)
    if not years:
        raise ValueError("empty map sequence")
    # years are sorted ascending, so min() keeps the first (earlier) of a tie
    return min(range(len(years)), key=lambda k: abs(label_year - years[k]))


@dataclass
class TraceState:
    years: tuple
    anchor_index: int
    mode: str = "bi"
    step: int = 0
    active: frozenset = None
    # index -> "gt" or "pseudo@<step>" where <step> produced the label
    label_sources: dict = field(default_factory=dict)
    exhausted: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.anchor_index < len(self.years):
            raise ValueError("anchor index outside the sequence")
        if self.active is None:
            self.active = frozenset({self.anchor_index})

    @property
    def size(self) -> int:
        return len(self.years)

    def bounds(self, step: int) -> tuple:
        """Closed index range active at ``step``."""
        i, last = self.anchor_index, self.size - 1
        lo = max(0, i - step) if self.mode in ("bi", "mono_past") else i
        hi = min(last, i + step) if self.mode in ("bi", "mono_future") else i
        return lo, hi

    @property
    def final_step(self) -> int:
        i, last = self.anchor_index, self.size - 1
        return {"bi": max(i, last - i), "mono_past": i, "mono_future": last - i}[self.mode]

    def to_dict(self) -> dict:
        return {
            "years": list(self.years),
            "anchor_index": self.anchor_index,
            "mode": self.mode,
            "step": self.step,
            "active": sorted(self.active),
            "label_sources": {str(k): v for k, v in sorted(self.label_sources.items())},
            "exhausted": self.exhausted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceState":
        return cls(
            years=tuple(d["years"]),
            anchor_index=d["anchor_index"],
            mode=d["mode"],
            step=d["step"],
            active=frozenset(d["active"]),
            label_sources={int(k): v for k, v in d["label_sources"].items()},
            exhausted=d["exhausted"],
        )


def next_step(state: TraceState) -> tuple:
    """Advance one tracing step.

    Returns ``(new_indices, new_state)``; ``new_indices`` is empty and
    ``new_state.exhausted`` is set once every reachable map is active.
    """
    if state.exhausted or state.step >= state.final_step:
        return frozenset(), replace(state, exhausted=True)
    n = state.step + 1
    lo, hi = state.bounds(n)
    active = frozenset(range(lo, hi + 1))
    new = active - state.active
    return new, replace(state, step=n, active=active, label_sources=dict(state.label_sources))


def active_schedule(size: int, anchor: int, mode: str = "bi") -> list:
    """All active sets from step 0 until exhaustion."""
    state = TraceState(tuple(range(size)), anchor, mode)
    out = [state.active]
    while True:
        new, state = next_step(state)
        if state.exhausted:
            return out
        out.append(state.active)


def training_set(state: TraceState, sheets: dict, labels: dict) -> list:
    """(sheet, label) pairs for every active index, cumulative.

    ``sheets`` and ``labels`` map sequence index -> MapSheet / LabelRaster.
    """
    pairs = []
    for k in sorted(state.active):
        if k not in labels:
            raise KeyError(f"no label for active index {k} (year {state.years[k]})")
        pairs.append((sheets[k], labels[k]))
    return pairs


class TraceJournal:
    """Append-only JSON log of tracing steps, ``{run_dir}/trace.json``."""

    def __init__(self, path):
        self.path = Path(path)
        self.records: list = []
        if self.path.exists():
            self.records = json.loads(self.path.read_text()).get("steps", [])

    def append(self, record: dict) -> None:
        self.records.append(record)
        self._flush()

    def _flush(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps({"steps": self.records}, indent=2))
        tmp.replace(self.path)

    @property
    def last(self) -> Optional[dict]:
        return self.records[-1] if self.records else None

    def __len__(self) -> int:
        return len(self.records)
