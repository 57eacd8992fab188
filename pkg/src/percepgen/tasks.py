"""Task kinds, per-task intensities and task categories."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

from .errors import ContractError


class TaskKind(enum.Enum):
    # declaration order is the canonical order used for categories and prompts
    DRE = "DRE"
    ID = "ID"
    F = "F"
    C = "C"

    @property
    def is_restoration(self) -> bool:
        return self in (TaskKind.DRE, TaskKind.ID)

    @property
    def is_stylization(self) -> bool:
        return not self.is_restoration

    @property
    def rank(self) -> int:
        return _ORDER[self]

    @property
    def long_name(self) -> str:
        return _LONG_NAMES[self]

    @classmethod
    def parse(cls, value) -> "TaskKind":
        if isinstance(value, TaskKind):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ContractError(f"unknown task kind {value!r}") from None


_ORDER = {k: i for i, k in enumerate(TaskKind)}
_LONG_NAMES = {
    TaskKind.DRE: "Dynamic Range Enhancement",
    TaskKind.ID: "Image Denoising",
    TaskKind.F: "Foveation",
    TaskKind.C: "Chromostereopsis",
}


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    intensity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind.parse(self.kind))
        if not 0.0 < self.intensity <= 1.0:
            raise ContractError(f"intensity {self.intensity} outside (0, 1]")

    def as_dict(self):
        return {"kind": self.kind.value, "intensity": self.intensity}

    @classmethod
    def from_dict(cls, d) -> "TaskSpec":
        return cls(TaskKind.parse(d["kind"]), float(d["intensity"]))


class TaskCategory(frozenset):
    """Canonical, order-free set of task kinds, e.g. ``ID+F``."""

    def __new__(cls, kinds: Iterable = ()):
        return super().__new__(cls, (TaskKind.parse(k) for k in kinds))

    @classmethod
    def parse(cls, text: str) -> "TaskCategory":
        parts = [p for p in str(text).replace(" ", "").split("+") if p]
        if not parts:
            raise ContractError("empty task category")
        if len(set(parts)) != len(parts):
            raise ContractError(f"duplicate task in category {text!r}")
        return cls(parts)

    @property
    def kinds(self):
        return sorted(self, key=lambda k: k.rank)

    @property
    def is_single(self) -> bool:
        return len(self) == 1

    @property
    def name(self) -> str:
        return "+".join(k.value for k in self.kinds)

    def __str__(self):
        return self.name

    def __repr__(self):
        return f"TaskCategory({self.name!r})"

    def sort_key(self):
        return (len(self), [k.rank for k in self.kinds])


def category_of(tasks: Iterable[TaskSpec]) -> TaskCategory:
    return TaskCategory(t.kind for t in tasks)


# the nine task combinations reported in the quantitative comparison
PAPER_CATEGORIES = tuple(
    TaskCategory.parse(c)
    for c in ("F", "DRE", "ID", "C", "ID+C", "DRE+C", "ID+F", "DRE+F", "DRE+ID+F+C")
)
SINGLE_CATEGORIES = tuple(TaskCategory([k]) for k in TaskKind)
