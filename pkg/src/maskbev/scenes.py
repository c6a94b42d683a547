"""Procedural BEV scenes: semantic map rasters, 7-DoF objects, noisy observations.

Grids are centred on the ego origin. Cell (row, col) covers
``x in [x0 + col*m, x0 + (col+1)*m)``, ``y in [y0 + row*m, y0 + (row+1)*m)``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SEG_CLASSES = ("drivable", "ped_crossing", "walkway", "stop_line", "carpark", "divider")
DET_CLASSES = ("vehicle", "pedestrian", "barrier")

# pairs that never share a cell
EXCLUSIVE_PAIRS = (
    ("drivable", "divider"),
    ("drivable", "walkway"),
    ("drivable", "carpark"),
    ("walkway", "divider"),
    ("walkway", "carpark"),
    ("carpark", "divider"),
)
# (subset, superset)
CONTAINED_PAIRS = (("ped_crossing", "drivable"), ("stop_line", "drivable"))

DEFAULT_SIZES = {
    # (l_min, l_max), (w_min, w_max), (h_min, h_max)
    "vehicle": ((3.6, 5.0), (1.7, 2.1), (1.4, 1.9)),
    "pedestrian": ((0.5, 0.9), (0.5, 0.8), (1.6, 1.9)),
    "barrier": ((1.5, 2.5), (0.4, 0.6), (0.8, 1.1)),
}
DEFAULT_CLASS_PROBS = {"vehicle": 0.6, "pedestrian": 0.25, "barrier": 0.15}


@dataclass(frozen=True)
class GridSpec:
    h: int = 64
    w: int = 64
    meters_per_cell: float = 1.0

    def __post_init__(self):
        if self.h < 8 or self.w < 8:
            raise ValueError(f"grid must be at least 8x8, got {self.h}x{self.w}")
        if not self.meters_per_cell > 0:
            raise ValueError("meters_per_cell must be positive")

    @property
    def origin(self) -> tuple[float, float]:
        """Metric (x, y) of the lower corner of cell (0, 0)."""
        return (-self.w * self.meters_per_cell / 2.0, -self.h * self.meters_per_cell / 2.0)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return x0, x0 + self.w * self.meters_per_cell, y0, y0 + self.h * self.meters_per_cell

    def cell_to_metric(self, row, col):
        x0, y0 = self.origin
        m = self.meters_per_cell
        return x0 + (np.asarray(col) + 0.5) * m, y0 + (np.asarray(row) + 0.5) * m

    def metric_to_cell(self, x, y):
        x0, y0 = self.origin
        m = self.meters_per_cell
        col = np.floor((np.asarray(x, dtype=np.float64) - x0) / m).astype(np.int64)
        row = np.floor((np.asarray(y, dtype=np.float64) - y0) / m).astype(np.int64)
        return row, col

    def contains(self, x, y) -> bool:
        xa, xb, ya, yb = self.extent
        return bool(xa <= x < xb and ya <= y < yb)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) arrays of shape (h, w)."""
        rows, cols = np.mgrid[0:self.h, 0:self.w]
        return self.cell_to_metric(rows, cols)

    def to_json(self) -> dict:
        return {"h": self.h, "w": self.w, "m_per_cell": self.meters_per_cell}

    @classmethod
    def from_json(cls, d: dict) -> "GridSpec":
        return cls(int(d["h"]), int(d["w"]), float(d["m_per_cell"]))


def wrap_angle(theta: float) -> float:
    """Map to (-pi, pi]."""
    t = math.remainder(theta, 2 * math.pi)
    return math.pi if t == -math.pi else t


@dataclass
class SceneObject:
    class_id: int
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float

    def as_anchor(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.theta])


@dataclass
class Scene:
    objects: list[SceneObject]
    semantic: np.ndarray  # (K_seg, H, W) uint8 in {0, 1}
    seed: int
    grid: GridSpec
    seg_classes: tuple = SEG_CLASSES

    def boxes(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 7))
        return np.stack([o.as_anchor() for o in self.objects])

    def labels(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=np.int64)


@dataclass
class Observation:
    raster: np.ndarray  # (C_in, H, W) float32


@dataclass
class GeneratorConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    det_classes: tuple = DET_CLASSES
    seg_classes: tuple = SEG_CLASSES
    density: float = 1.5  # expected objects per 100 drivable cells
    max_objects: int = 24
    road_half_width: tuple = (4.0, 7.0)
    walkway_width: tuple = (2.0, 3.5)
    two_road_prob: float = 0.6
    crossing_prob: float = 0.8
    max_carparks: int = 2

    def validate(self) -> None:
        if not self.det_classes or not self.seg_classes:
            raise ValueError("generator config needs at least one detection and one map class")
        unknown = [c for c in self.seg_classes if c not in SEG_CLASSES]
        unknown += [c for c in self.det_classes if c not in DET_CLASSES]
        if unknown:
            raise ValueError(f"unknown classes: {unknown}")
        if self.density < 0 or self.max_objects < 0:
            raise ValueError("density and max_objects must be non-negative")

    def to_json(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_json()
        for k in ("det_classes", "seg_classes", "road_half_width", "walkway_width"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["grid"] = GridSpec.from_json(d["grid"])
        for k in ("det_classes", "seg_classes", "road_half_width", "walkway_width"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------

_EDGE_TOL = 1e-9


def footprint_mask(x: float, y: float, l: float, w: float, theta: float, grid: GridSpec) -> np.ndarray:
    """Cells whose centres fall inside the rotated l x w rectangle, plus the centre cell."""
    # the footprint only depends on the heading modulo pi
    phi = math.fmod(theta, math.pi)
    if phi < 0:
        phi += math.pi
    c, s = math.cos(phi), math.sin(phi)
    X, Y = grid.cell_centers()
    dx, dy = X - x, Y - y
    along = np.abs(dx * c + dy * s)
    across = np.abs(-dx * s + dy * c)
    mask = (along <= l / 2 + _EDGE_TOL) & (across <= w / 2 + _EDGE_TOL)
    row, col = grid.metric_to_cell(x, y)
    if 0 <= row < grid.h and 0 <= col < grid.w:
        mask[row, col] = True
    return mask


def heading_mask(obj: SceneObject, grid: GridSpec) -> np.ndarray:
    """Front half of the object footprint."""
    X, Y = grid.cell_centers()
    fwd = (X - obj.x) * math.cos(obj.theta) + (Y - obj.y) * math.sin(obj.theta)
    return footprint_mask(obj.x, obj.y, obj.l, obj.w, obj.theta, grid) & (fwd > 0)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _road_frames(X, Y, px, py, angle):
    c, s = math.cos(angle), math.sin(angle)
    along = (X - px) * c + (Y - py) * s
    across = -(X - px) * s + (Y - py) * c
    return along, across


def _semantic_layers(rng: np.random.Generator, cfg: GeneratorConfig):
    grid = cfg.grid
    X, Y = grid.cell_centers()
    xa, xb, ya, yb = grid.extent
    span = min(xb - xa, yb - ya)
    px = rng.uniform(-0.2, 0.2) * span
    py = rng.uniform(-0.2, 0.2) * span
    n_roads = 2 if rng.random() < cfg.two_road_prob else 1
    angles = [rng.uniform(0, math.pi)]
    if n_roads == 2:
        angles.append(angles[0] + math.pi / 2 + rng.uniform(-math.pi / 6, math.pi / 6))
    roads = []
    for a in angles:
        hw = rng.uniform(*cfg.road_half_width)
        ww = rng.uniform(*cfg.walkway_width)
        along, across = _road_frames(X, Y, px, py, a)
        roads.append({"angle": a, "hw": hw, "ww": ww, "along": along, "across": across})

    bands = [np.abs(r["across"]) <= r["hw"] for r in roads]
    road_any = np.logical_or.reduce(bands)
    crossing = np.zeros_like(road_any)
    stop = np.zeros_like(road_any)
    for i, r in enumerate(roads):
        if rng.random() >= cfg.crossing_prob:
            continue
        if n_roads == 2:
            other = roads[1 - i]
            side = 1.0 if rng.random() < 0.5 else -1.0
            centre = side * (other["hw"] + rng.uniform(2.5, 4.5))
        else:
            side = 1.0 if rng.random() < 0.5 else -1.0
            centre = rng.uniform(-0.25, 0.25) * span
        crossing |= bands[i] & (np.abs(r["along"] - centre) <= 1.5)
        # stop line on the approach lane, one cell beyond the crossing
        stop_at = centre + side * 2.5
        lane = r["across"] * side < 0
        stop |= bands[i] & (np.abs(r["along"] - stop_at) <= 0.5) & lane
    stop &= ~crossing

    divider = np.zeros_like(road_any)
    for i, r in enumerate(roads):
        dashed = np.mod(r["along"], 8.0) < 5.0
        line = (np.abs(r["across"]) <= 0.5) & dashed
        for j, b in enumerate(bands):
            if j != i:
                line &= ~b
        divider |= line
    divider &= ~(crossing | stop)

    drivable = road_any & ~divider
    crossing &= drivable
    stop &= drivable

    walk = np.zeros_like(road_any)
    for r in roads:
        walk |= np.abs(r["across"]) <= r["hw"] + r["ww"]
    walk &= ~road_any

    carpark = np.zeros_like(road_any)
    for _ in range(int(rng.integers(0, cfg.max_carparks + 1))):
        r = roads[int(rng.integers(0, n_roads))]
        side = 1.0 if rng.random() < 0.5 else -1.0
        off = side * (r["hw"] + r["ww"] + rng.uniform(4.0, 8.0))
        at = rng.uniform(-0.3, 0.3) * span
        half_l, half_w = rng.uniform(4.0, 7.0), rng.uniform(3.0, 5.0)
        carpark |= (np.abs(r["along"] - at) <= half_l) & (np.abs(r["across"] - off) <= half_w)
    carpark &= ~(road_any | walk)

    layers = {
        "drivable": drivable,
        "ped_crossing": crossing,
        "walkway": walk,
        "stop_line": stop,
        "carpark": carpark,
        "divider": divider,
    }
    return layers, roads


def _place_objects(rng: np.random.Generator, cfg: GeneratorConfig, drivable: np.ndarray, roads) -> list[SceneObject]:
    grid = cfg.grid
    cells = np.flatnonzero(drivable)
    if cfg.density <= 0 or cfg.max_objects == 0 or cells.size == 0:
        return []
    target = min(cfg.max_objects, int(rng.poisson(cfg.density * cells.size / 100.0)))
    names = list(cfg.det_classes)
    probs = np.array([DEFAULT_CLASS_PROBS[n] for n in names])
    probs = probs / probs.sum()
    occupied = np.zeros_like(drivable)
    objects: list[SceneObject] = []
    m = grid.meters_per_cell
    for _ in range(target * 30):
        if len(objects) >= target:
            break
        cell = int(cells[rng.integers(0, cells.size)])
        row, col = divmod(cell, grid.w)
        cx, cy = grid.cell_to_metric(row, col)
        x = float(cx + rng.uniform(-0.45, 0.45) * m)
        y = float(cy + rng.uniform(-0.45, 0.45) * m)
        cid = int(rng.choice(len(names), p=probs))
        (l0, l1), (w0, w1), (h0, h1) = DEFAULT_SIZES[names[cid]]
        l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
        nearest = min(roads, key=lambda r: abs(r["across"][row, col]))
        if names[cid] == "pedestrian":
            theta = rng.uniform(-math.pi, math.pi)
        else:
            theta = nearest["angle"] + rng.normal(0.0, 0.08)
            if names[cid] == "barrier" and rng.random() < 0.5:
                theta += math.pi / 2
            if rng.random() < 0.5:
                theta += math.pi
        theta = wrap_angle(float(theta))
        z = h / 2 + rng.uniform(-0.1, 0.1)
        fp = footprint_mask(x, y, l, w, theta, grid)
        if (fp & occupied).any():
            continue
        occupied |= fp
        objects.append(SceneObject(cid, x, y, float(z), float(l), float(w), float(h), theta))
    return objects


def generate_scene(seed: int, cfg: GeneratorConfig | None = None) -> Scene:
    """Deterministic function of (seed, cfg)."""
    cfg = cfg or GeneratorConfig()
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    layers, roads = _semantic_layers(rng, cfg)
    objects = _place_objects(rng, cfg, layers["drivable"], roads)
    semantic = np.stack([layers[name] for name in cfg.seg_classes]).astype(np.uint8)
    return Scene(objects, semantic, int(seed), cfg.grid, tuple(cfg.seg_classes))


def scene_seed(base_seed: int, index: int) -> int:
    """u64 seed of the index-th scene of a dataset."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

def observation_channels(n_seg: int, n_det: int) -> int:
    return n_seg + n_det + 1


def clean_raster(scene: Scene, n_det: int = len(DET_CLASSES)) -> np.ndarray:
    """Class-coded map layers, per-class box silhouettes and a heading channel."""
    grid = scene.grid
    n_seg = scene.semantic.shape[0]
    out = np.zeros((observation_channels(n_seg, n_det), grid.h, grid.w), dtype=np.float32)
    out[:n_seg] = scene.semantic
    for obj in scene.objects:
        out[n_seg + obj.class_id] += footprint_mask(obj.x, obj.y, obj.l, obj.w, obj.theta, grid)
        out[-1] += heading_mask(obj, grid)
    np.minimum(out, 1.0, out=out)
    return out


def render_observation(scene: Scene, noise_sigma: float, seed: int, n_det: int = len(DET_CLASSES)) -> Observation:
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    raster = clean_raster(scene, n_det)
    if noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
        raster = raster + rng.normal(0.0, noise_sigma, size=raster.shape).astype(np.float32)
    return Observation(raster.astype(np.float32))


# ---------------------------------------------------------------------------
# scene files and datasets
# ---------------------------------------------------------------------------

def rle_row(row: np.ndarray) -> list[int]:
    """Run lengths alternating 0-runs and 1-runs, starting with a (possibly empty) 0-run."""
    runs: list[int] = []
    current, count = 0, 0
    for v in row.tolist():
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = v, 1
    runs.append(count)
    return runs


def unrle_row(runs: list[int], width: int) -> np.ndarray:
    out = np.zeros(width, dtype=np.uint8)
    pos, value = 0, 0
    for r in runs:
        out[pos:pos + r] = value
        pos += r
        value ^= 1
    if pos != width:
        raise ValueError(f"run lengths sum to {pos}, expected {width}")
    return out


def scene_to_json(scene: Scene) -> str:
    doc = {
        "seed": int(scene.seed),
        "grid": scene.grid.to_json(),
        "seg_classes": list(scene.seg_classes),
        "objects": [
            {"c": o.class_id, "x": o.x, "y": o.y, "z": o.z, "l": o.l, "w": o.w, "h": o.h, "theta": o.theta}
            for o in scene.objects
        ],
        "semantic": [[rle_row(row) for row in layer] for layer in scene.semantic],
    }
    return json.dumps(doc, separators=(",", ":"))


def scene_from_json(text: str) -> Scene:
    doc = json.loads(text)
    grid = GridSpec.from_json(doc["grid"])
    objects = [
        SceneObject(int(o["c"]), float(o["x"]), float(o["y"]), float(o["z"]), float(o["l"]), float(o["w"]),
                    float(o["h"]), float(o["theta"]))
        for o in doc["objects"]
    ]
    semantic = np.stack([np.stack([unrle_row(r, grid.w) for r in layer]) for layer in doc["semantic"]])
    return Scene(objects, semantic, int(doc["seed"]), grid, tuple(doc.get("seg_classes", SEG_CLASSES)))


@dataclass
class Manifest:
    count: int
    val_count: int
    seed: int
    cfg_hash: str
    generator: dict

    def split(self, name: str) -> list[int]:
        n_train = self.count - self.val_count
        if name == "train":
            return list(range(n_train))
        if name == "val":
            return list(range(n_train, self.count))
        if name == "all":
            return list(range(self.count))
        raise ValueError(f"unknown split {name!r}")


def scene_path(root, index: int) -> Path:
    return Path(root) / f"scene_{index:05d}.json"


def write_dataset(root, count: int, seed: int, cfg: GeneratorConfig | None = None, val_count: int = 0) -> Manifest:
    cfg = cfg or GeneratorConfig()
    cfg.validate()
    if not 0 <= val_count <= count:
        raise ValueError("val_count must lie in [0, count]")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        scene = generate_scene(scene_seed(seed, i), cfg)
        scene_path(root, i).write_text(scene_to_json(scene))
    manifest = Manifest(count, val_count, int(seed), cfg.digest(), cfg.to_json())
    (root / "manifest.json").write_text(json.dumps(asdict(manifest), indent=1, sort_keys=True))
    return manifest


def read_manifest(root) -> Manifest:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return Manifest(**json.loads(path.read_text()))


def load_scene(root, index: int) -> Scene:
    return scene_from_json(scene_path(root, index).read_text())
