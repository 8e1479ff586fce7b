"""Small value types shared across the twin pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np


@dataclass(frozen=True)
class MaterialAssignment:
    """Object id -> material index, plus the ground material.

    Instances are immutable; use :meth:`with_materials` to derive a modified copy.
    """

    object_materials: Mapping[int, int]
    ground_material: int

    def __post_init__(self):
        # freeze into a plain dict copy sorted by id so equality and hashing are stable
        object.__setattr__(
            self, "object_materials", dict(sorted((int(k), int(v)) for k, v in self.object_materials.items()))
        )
        object.__setattr__(self, "ground_material", int(self.ground_material))

    def __hash__(self):
        return hash((tuple(self.object_materials.items()), self.ground_material))

    def material_of(self, object_id: int) -> int:
        if object_id < 0:
            return self.ground_material
        return self.object_materials[object_id]

    def with_materials(self, updates: Mapping[int, int]) -> "MaterialAssignment":
        merged = dict(self.object_materials)
        ground = self.ground_material
        for k, v in updates.items():
            if k < 0:
                ground = int(v)
            else:
                if k not in merged:
                    raise KeyError(f"object {k} is not part of this assignment")
                merged[int(k)] = int(v)
        return MaterialAssignment(merged, ground)

    def restricted(self, object_ids: Iterable[int]) -> tuple[int, ...]:
        return tuple(self.material_of(i) for i in object_ids)

    def validate(self, object_ids: Iterable[int], num_materials: int) -> None:
        ids = sorted(object_ids)
        if sorted(self.object_materials) != ids:
            raise ValueError("assignment must cover every scene object exactly once")
        for k, v in self.object_materials.items():
            if not 0 <= v < num_materials:
                raise ValueError(f"material index {v} of object {k} out of range [0, {num_materials})")
        if not 0 <= self.ground_material < num_materials:
            raise ValueError(f"ground material index {self.ground_material} out of range")

    def to_json(self, names: list[str] | None = None) -> dict:
        def conv(v):
            return names[v] if names is not None else v

        return {
            "objects": {str(k): conv(v) for k, v in self.object_materials.items()},
            "ground": conv(self.ground_material),
        }

    @classmethod
    def from_json(cls, data: dict, names: list[str] | None = None) -> "MaterialAssignment":
        def conv(v):
            return names.index(v) if isinstance(v, str) else int(v)

        return cls({int(k): conv(v) for k, v in data["objects"].items()}, conv(data["ground"]))


@dataclass(frozen=True)
class Measurement:
    """A location-to-RSRP pair from the (synthetic) real network."""

    location: tuple[float, float, float]
    rsrp_dbm: float
    sequence: int = 0
    timestamp: float = 0.0

    @property
    def xyz(self) -> np.ndarray:
        return np.asarray(self.location, dtype=float)


@dataclass
class RunningStats:
    """Accumulates wall-clock samples (milliseconds)."""

    samples: list[float] = field(default_factory=list)

    def add(self, ms: float) -> None:
        self.samples.append(float(ms))

    def summary(self) -> dict:
        if not self.samples:
            return {"count": 0}
        arr = np.asarray(self.samples)
        return {
            "count": int(arr.size),
            "mean_ms": float(arr.mean()),
            "p50_ms": float(np.median(arr)),
            "p95_ms": float(np.percentile(arr, 95)),
            "max_ms": float(arr.max()),
        }
