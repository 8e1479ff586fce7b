"""Scene geometry, radio materials and link-budget configuration.

Buildings are extruded 2D footprints (vertical walls, flat roofs). Receivers
sit at a fixed height above a flat ground plane. Scenes are stored as JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import shapely

from .types import MaterialAssignment

PERFECT_CONDUCTOR = math.inf
# serialized form of the perfect-conductor permittivity
PERFECT_CONDUCTOR_TOKEN = "perfect_conductor"
GROUND_ID = -1
RX_HEIGHT_M = 1.0
DEFAULT_FREQUENCY_HZ = 2.14e9


class SceneError(Exception):
    """Base class for scene loading problems."""


class SceneParseError(SceneError):
    pass


class SceneValidationError(SceneError, ValueError):
    pass


@dataclass(frozen=True)
class Material:
    name: str
    rel_permittivity: float
    conductivity: float

    def __post_init__(self):
        if not (self.rel_permittivity >= 1.0):
            raise SceneValidationError(f"material {self.name!r}: rel_permittivity must be >= 1")
        if not (self.conductivity >= 0.0) or math.isnan(self.conductivity):
            raise SceneValidationError(f"material {self.name!r}: conductivity must be >= 0")

    @property
    def is_perfect_conductor(self) -> bool:
        return math.isinf(self.rel_permittivity)

    def complex_permittivity(self, frequency_hz: float) -> complex:
        """eps_r - j sigma / (omega eps_0); infinite for a perfect conductor."""
        if self.is_perfect_conductor:
            return complex(math.inf, 0.0)
        eps0 = 8.8541878128e-12
        omega = 2.0 * math.pi * frequency_hz
        return complex(self.rel_permittivity, -self.conductivity / (omega * eps0))

    def to_json(self) -> dict:
        eps = PERFECT_CONDUCTOR_TOKEN if self.is_perfect_conductor else self.rel_permittivity
        return {"name": self.name, "rel_permittivity": eps, "conductivity": self.conductivity}

    @classmethod
    def from_json(cls, d: dict) -> "Material":
        eps = d["rel_permittivity"]
        if eps == PERFECT_CONDUCTOR_TOKEN:
            eps = PERFECT_CONDUCTOR
        return cls(str(d["name"]), float(eps), float(d["conductivity"]))


@dataclass(frozen=True)
class MaterialSpace:
    materials: tuple[Material, ...]

    def __post_init__(self):
        object.__setattr__(self, "materials", tuple(self.materials))
        if len(self.materials) < 2:
            raise SceneValidationError("material space needs at least 2 materials")
        names = [m.name for m in self.materials]
        if len(set(names)) != len(names):
            raise SceneValidationError("material names must be unique within a material space")

    def __len__(self):
        return len(self.materials)

    def __getitem__(self, i: int) -> Material:
        return self.materials[i]

    def __iter__(self):
        return iter(self.materials)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.materials]

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"material {name!r} not in material space") from None

    def subset(self, names: Sequence[str]) -> "MaterialSpace":
        return MaterialSpace(tuple(self[self.index_of(n)] for n in names))


def _material_table() -> dict:
    text = resources.files("nettwin").joinpath("data/itu_materials.json").read_text()
    return json.loads(text)


def itu_material(name: str, frequency_hz: float = DEFAULT_FREQUENCY_HZ) -> Material:
    """Evaluate the ITU-R P.2040 frequency model for one named material."""
    table = _material_table()["materials"]
    if name not in table:
        raise KeyError(f"unknown ITU material {name!r}")
    row = table[name]
    if row.get("perfect_conductor"):
        return Material(name, PERFECT_CONDUCTOR, 0.0)
    f_ghz = frequency_hz / 1e9
    eps = row["a"] * f_ghz ** row["b"]
    sigma = row["c"] * f_ghz ** row["d"]
    return Material(name, max(1.0, eps), sigma)


def default_material_space(frequency_hz: float = DEFAULT_FREQUENCY_HZ) -> MaterialSpace:
    """The nine-material ITU space used for tuning."""
    names = _material_table()["default_space"]
    return MaterialSpace(tuple(itu_material(n, frequency_hz) for n in names))


@dataclass(frozen=True)
class TxConfig:
    position: tuple[float, float, float]
    tx_power_dbm: float = 37.0
    tx_gain_dbi: float = 12.0
    tx_losses_db: float = 15.0
    misc_losses_db: float = 18.0
    rx_gain_dbi: float = 1.0
    rx_losses_db: float = 18.0
    frequency_hz: float = DEFAULT_FREQUENCY_HZ

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        if len(self.position) != 3:
            raise SceneValidationError("tx position must be a 3D point")
        if not self.frequency_hz > 0:
            raise SceneValidationError("tx frequency_hz must be > 0")
        for name in ("tx_power_dbm", "tx_gain_dbi", "tx_losses_db", "misc_losses_db", "rx_gain_dbi", "rx_losses_db"):
            if not math.isfinite(getattr(self, name)):
                raise SceneValidationError(f"tx {name} must be finite")

    @property
    def budget_db(self) -> float:
        """All scalar gains and losses, excluding the path loss."""
        return (
            self.tx_power_dbm + self.tx_gain_dbi + self.rx_gain_dbi
            - self.tx_losses_db - self.misc_losses_db - self.rx_losses_db
        )

    @property
    def wavelength_m(self) -> float:
        return 299_792_458.0 / self.frequency_hz

    def moved(self, position) -> "TxConfig":
        return TxConfig(tuple(position), self.tx_power_dbm, self.tx_gain_dbi, self.tx_losses_db,
                        self.misc_losses_db, self.rx_gain_dbi, self.rx_losses_db, self.frequency_hz)

    def to_json(self) -> dict:
        return {
            "position": list(self.position),
            "tx_power_dbm": self.tx_power_dbm,
            "tx_gain_dbi": self.tx_gain_dbi,
            "tx_losses_db": self.tx_losses_db,
            "misc_losses_db": self.misc_losses_db,
            "rx_gain_dbi": self.rx_gain_dbi,
            "rx_losses_db": self.rx_losses_db,
            "frequency_hz": self.frequency_hz,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TxConfig":
        return cls(
            tuple(d["position"]),
            **{k: float(d[k]) for k in ("tx_power_dbm", "tx_gain_dbi", "tx_losses_db", "misc_losses_db",
                                         "rx_gain_dbi", "rx_losses_db", "frequency_hz") if k in d},
        )


@dataclass(frozen=True)
class WallFace:
    """Vertical wall rectangle spanning edge a->b, from z=0 to z=height."""

    object_id: int
    face_id: int
    a: tuple[float, float]
    b: tuple[float, float]
    height: float
    normal: tuple[float, float]


@dataclass(frozen=True)
class SceneObject:
    id: int
    footprint: tuple[tuple[float, float], ...]
    height: float
    material_index: int

    def __post_init__(self):
        fp = tuple((float(x), float(y)) for x, y in self.footprint)
        object.__setattr__(self, "footprint", fp)
        if len(fp) < 3:
            raise SceneValidationError(f"object {self.id}: footprint needs >= 3 vertices")
        if not self.height > 0:
            raise SceneValidationError(f"object {self.id}: height must be > 0")
        ring = shapely.LinearRing(fp)
        if not ring.is_simple:
            raise SceneValidationError(f"object {self.id}: footprint must be a simple polygon")
        if not ring.is_ccw:
            raise SceneValidationError(f"object {self.id}: footprint must be counter-clockwise")

    @cached_property
    def polygon(self) -> shapely.Polygon:
        return shapely.Polygon(self.footprint)

    def wall_faces(self) -> list[WallFace]:
        faces = []
        n = len(self.footprint)
        for k in range(n):
            (ax, ay), (bx, by) = self.footprint[k], self.footprint[(k + 1) % n]
            dx, dy = bx - ax, by - ay
            length = math.hypot(dx, dy)
            # right-hand normal of a CCW edge points outward
            faces.append(WallFace(self.id, k, (ax, ay), (bx, by), self.height, (dy / length, -dx / length)))
        return faces

    def to_json(self, space: MaterialSpace) -> dict:
        return {
            "id": self.id,
            "footprint": [list(p) for p in self.footprint],
            "height": self.height,
            "material": space[self.material_index].name,
        }


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    ground_material_index: int
    tx: TxConfig
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    d_max: float
    material_space: MaterialSpace = field(default_factory=default_material_space)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "bounds", tuple(float(v) for v in self.bounds))
        self.validate()

    def validate(self) -> None:
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise SceneValidationError("bounds must be a non-empty rectangle")
        if self.d_max < math.hypot(xmax - xmin, ymax - ymin) - 1e-9:
            raise SceneValidationError("d_max must be >= the diameter of bounds")
        B = len(self.material_space)
        if not 0 <= self.ground_material_index < B:
            raise SceneValidationError("ground material index must be < B")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise SceneValidationError("object ids must be unique")
        box = shapely.box(xmin, ymin, xmax, ymax)
        for o in self.objects:
            if not 0 <= o.material_index < B:
                raise SceneValidationError(f"object {o.id}: material index must be < B")
            if not box.covers(o.polygon):
                raise SceneValidationError(f"object {o.id}: footprint must lie within bounds")

    @property
    def num_materials(self) -> int:
        return len(self.material_space)

    @property
    def object_ids(self) -> list[int]:
        return [o.id for o in self.objects]

    def object_by_id(self, object_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)

    def wall_faces(self) -> list[WallFace]:
        return [f for o in self.objects for f in o.wall_faces()]

    def assignment(self) -> MaterialAssignment:
        """The materials stored in the scene itself."""
        return MaterialAssignment({o.id: o.material_index for o in self.objects}, self.ground_material_index)

    def in_bounds(self, point) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= point[0] <= xmax and ymin <= point[1] <= ymax

    def indoor_mask(self, xy: np.ndarray) -> np.ndarray:
        """True where a planar point falls inside (or on) any building footprint."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        mask = np.zeros(len(xy), dtype=bool)
        for o in self.objects:
            mask |= shapely.intersects_xy(o.polygon, xy[:, 0], xy[:, 1])
        return mask

    def replace(self, **changes) -> "Scene":
        kw = dict(objects=self.objects, ground_material_index=self.ground_material_index, tx=self.tx,
                  bounds=self.bounds, d_max=self.d_max, material_space=self.material_space)
        kw.update(changes)
        return Scene(**kw)

    def to_json(self) -> dict:
        return {
            "bounds": list(self.bounds),
            "d_max": self.d_max,
            "tx": self.tx.to_json(),
            "ground_material": self.material_space[self.ground_material_index].name,
            "objects": [o.to_json(self.material_space) for o in self.objects],
            "material_space": [m.to_json() for m in self.material_space],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Scene":
        try:
            space = MaterialSpace(tuple(Material.from_json(m) for m in data["material_space"]))
            objects = tuple(
                SceneObject(int(o["id"]), tuple(tuple(p) for p in o["footprint"]), float(o["height"]),
                            space.index_of(o["material"]))
                for o in data["objects"]
            )
            ground = space.index_of(data["ground_material"])
            return cls(objects, ground, TxConfig.from_json(data["tx"]), tuple(data["bounds"]),
                       float(data["d_max"]), space)
        except SceneValidationError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneValidationError(f"invalid scene document: {exc}") from exc


def load_scene(path) -> Scene:
    """Read a scene JSON file. A sealed hidden-truth block, if present, is never read."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise SceneParseError(f"{path}: top level must be an object")
    data = {k: v for k, v in data.items() if k != "sealed"}
    return Scene.from_json(data)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_json(), indent=1))


def default_assignment(scene: Scene, space: MaterialSpace | None = None) -> MaterialAssignment:
    """Every building on itu-marble, ground on itu-concrete."""
    space = space or scene.material_space
    marble = space.index_of("itu-marble")
    concrete = space.index_of("itu-concrete")
    return MaterialAssignment({o.id: marble for o in scene.objects}, concrete)


def box_footprint(x0: float, y0: float, x1: float, y1: float) -> tuple[tuple[float, float], ...]:
    """CCW axis-aligned rectangle."""
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))
