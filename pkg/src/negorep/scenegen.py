"""Synthetic bird's-eye-view scenes, per-modality observations and labels.

Every observation and label grid is expressed in an agent's ego frame.  Cell
``(row, col)`` of a grid with half-width ``extent`` and ``resolution`` cells per
meter has its center at ``x = -extent + (col + 0.5) / resolution`` and
``y = -extent + (row + 0.5) / resolution``.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

SCENE_SCHEMA = "negorep.scene/v1"
GRID_SCHEMA = "negorep.grid/v1"


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return math.pi - (math.pi - theta) % (2.0 * math.pi)


@dataclass(frozen=True)
class Scene:
    # rows of (center_x, center_y, width, length, yaw)
    objects: tuple[tuple[float, float, float, float, float], ...]
    world_extent: float
    seed: int

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.objects, dtype=np.float64).reshape(-1, 5)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    kind: str  # "sparse-ray" | "dense-blur"
    ray_count: int = 128
    blur_sigma: float = 0.0
    dropout_rate: float = 0.0
    grid_resolution: float = 1.0
    sensing_range: float = math.inf

    def __post_init__(self):
        if self.kind not in ("sparse-ray", "dense-blur"):
            raise ValueError(f"unknown modality kind {self.kind!r}")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout_rate must lie in [0, 1]")
        if self.kind == "sparse-ray" and self.ray_count < 8:
            raise ValueError("sparse-ray modality needs ray_count >= 8")
        if self.kind == "dense-blur" and self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        if self.grid_resolution <= 0:
            raise ValueError("grid_resolution must be positive")


@dataclass(frozen=True)
class GridSpec:
    extent: float  # half-width in meters
    resolution: float  # cells per meter

    @property
    def size(self) -> int:
        n = 2.0 * self.extent * self.resolution
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"extent {self.extent} x resolution {self.resolution} is not an integer cell count")
        return int(round(n))

    @property
    def cell(self) -> float:
        return 1.0 / self.resolution


@dataclass
class OccupancyGrid:
    cells: np.ndarray
    grid_spec: GridSpec = field(default_factory=lambda: GridSpec(32.0, 1.0))

    def __post_init__(self):
        n = self.grid_spec.size
        if self.cells.shape != (n, n):
            raise ValueError(f"occupancy shape {self.cells.shape} does not match grid {n}x{n}")


def generate_scene(seed: int, n_objects: int, world_extent: float = 32.0) -> Scene:
    if n_objects < 1:
        raise ValueError("a scene needs at least one object")
    if world_extent <= 0:
        raise ValueError("world_extent must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-world_extent, world_extent, size=(n_objects, 2))
    widths = rng.uniform(1.6, 2.4, size=n_objects)
    lengths = rng.uniform(3.0, 5.0, size=n_objects)
    yaws = rng.uniform(-math.pi, math.pi, size=n_objects)
    objects = tuple(
        (float(c[0]), float(c[1]), float(w), float(l), normalize_angle(float(t)))
        for c, w, l, t in zip(centers, widths, lengths, yaws)
    )
    return Scene(objects=objects, world_extent=float(world_extent), seed=int(seed))


def cell_centers(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Ego-frame (x, y) coordinates of every cell center, each shaped (n, n)."""
    n = grid.size
    c = -grid.extent + (np.arange(n) + 0.5) * grid.cell
    xs, ys = np.meshgrid(c, c)  # rows vary in y
    return xs, ys


def ego_to_world(pose: Pose, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    return pose.x + c * x - s * y, pose.y + s * x + c * y


def world_to_ego(pose: Pose, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    dx, dy = x - pose.x, y - pose.y
    return c * dx + s * dy, -s * dx + c * dy


def points_in_objects(objects: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Boolean mask, same shape as x, of world points inside any object rectangle."""
    if len(objects) == 0:
        return np.zeros(np.shape(x), dtype=bool)
    px = np.asarray(x)[..., None]
    py = np.asarray(y)[..., None]
    cx, cy, w, l, t = (objects[:, k] for k in range(5))
    dx, dy = px - cx, py - cy
    along = dx * np.cos(t) + dy * np.sin(t)
    across = -dx * np.sin(t) + dy * np.cos(t)
    inside = (np.abs(along) <= l / 2) & (np.abs(across) <= w / 2)
    return inside.any(axis=-1)


def rasterize(scene: Scene, pose: Pose, grid: GridSpec) -> np.ndarray:
    """Exact silhouettes: 1 where the cell center lies in some object."""
    xs, ys = cell_centers(grid)
    wx, wy = ego_to_world(pose, xs, ys)
    return points_in_objects(scene.array, wx, wy).astype(np.float32)


def occupancy_labels(scene: Scene, pose: Pose, grid_spec: GridSpec) -> OccupancyGrid:
    return OccupancyGrid(cells=rasterize(scene, pose, grid_spec).astype(np.uint8), grid_spec=grid_spec)


def _cast_rays(scene: Scene, pose: Pose, modality: ModalitySpec, grid: GridSpec) -> np.ndarray:
    out = np.zeros((grid.size, grid.size), dtype=np.float32)
    max_range = min(modality.sensing_range, grid.extent * math.sqrt(2.0))
    step = 0.5 * grid.cell
    radii = np.arange(step, max_range + 1e-9, step)
    angles = pose.yaw + np.linspace(-math.pi, math.pi, modality.ray_count, endpoint=False)
    wx = pose.x + np.cos(angles)[:, None] * radii[None, :]
    wy = pose.y + np.sin(angles)[:, None] * radii[None, :]
    hit = points_in_objects(scene.array, wx, wy)
    has_hit = hit.any(axis=1)
    first = hit.argmax(axis=1)
    rows = np.nonzero(has_hit)[0]
    ex, ey = world_to_ego(pose, wx[rows, first[rows]], wy[rows, first[rows]])
    col = np.floor((ex + grid.extent) * grid.resolution).astype(int)
    row = np.floor((ey + grid.extent) * grid.resolution).astype(int)
    ok = (col >= 0) & (col < grid.size) & (row >= 0) & (row < grid.size)
    out[row[ok], col[ok]] = 1.0
    return out


def render_observation(
    scene: Scene, pose: Pose, modality: ModalitySpec, seed: int, grid_extent: float | None = None
) -> np.ndarray:
    """Degraded ego-frame view of ``scene`` as seen from ``pose``.

    ``grid_extent`` defaults to the scene's world extent.
    """
    extent = scene.world_extent if grid_extent is None else grid_extent
    if abs(pose.x) > scene.world_extent or abs(pose.y) > scene.world_extent:
        raise ValueError("pose lies outside the world extent")
    grid = GridSpec(extent, modality.grid_resolution)
    rng = np.random.default_rng(seed)
    if modality.kind == "sparse-ray":
        obs = _cast_rays(scene, pose, modality, grid)
    else:
        obs = rasterize(scene, pose, grid)
        if math.isfinite(modality.sensing_range):
            xs, ys = cell_centers(grid)
            obs = obs * (np.hypot(xs, ys) <= modality.sensing_range)
        if modality.blur_sigma > 0:
            obs = ndimage.gaussian_filter(obs, sigma=modality.blur_sigma, mode="constant")
    if modality.dropout_rate > 0:
        obs = obs * (rng.random(obs.shape) >= modality.dropout_rate)
    return obs.astype(np.float32)


def apply_pose_noise(pose: Pose, sigma_xy: float, sigma_yaw: float, rng: np.random.Generator) -> Pose:
    if sigma_xy < 0 or sigma_yaw < 0:
        raise ValueError("noise scales must be non-negative")
    dx, dy = rng.normal(0.0, sigma_xy, size=2) if sigma_xy > 0 else (0.0, 0.0)
    dyaw = rng.normal(0.0, sigma_yaw) if sigma_yaw > 0 else 0.0
    return Pose(pose.x + float(dx), pose.y + float(dy), pose.yaw + float(dyaw))


# -- serialization -----------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    return {
        "schema": SCENE_SCHEMA,
        "seed": scene.seed,
        "world_extent": scene.world_extent,
        "objects": [list(o) for o in scene.objects],
    }


def scene_from_dict(d: dict) -> Scene:
    if d.get("schema") != SCENE_SCHEMA:
        raise ValueError(f"not a scene record: {d.get('schema')!r}")
    objects = tuple(tuple(float(v) for v in o) for o in d["objects"])
    if any(len(o) != 5 for o in objects):
        raise ValueError("each object must carry exactly 5 floats")
    return Scene(objects=objects, world_extent=float(d["world_extent"]), seed=int(d["seed"]))


def grid_to_dict(cells: np.ndarray, grid_spec: GridSpec | None = None) -> dict:
    cells = np.asarray(cells)
    d = {
        "schema": GRID_SCHEMA,
        "shape": list(cells.shape),
        "dtype": str(cells.dtype),
        "data": cells.ravel(order="C").tolist(),
    }
    if grid_spec is not None:
        d["extent"] = grid_spec.extent
        d["resolution"] = grid_spec.resolution
    return d


def grid_from_dict(d: dict) -> np.ndarray:
    if d.get("schema") != GRID_SCHEMA:
        raise ValueError(f"not a grid record: {d.get('schema')!r}")
    return np.asarray(d["data"], dtype=d["dtype"]).reshape(d["shape"])


def dumps(scene: Scene, grids: dict[str, np.ndarray] | None = None) -> str:
    payload = {"scene": scene_to_dict(scene), "grids": {k: grid_to_dict(v) for k, v in (grids or {}).items()}}
    return json.dumps(payload)


def loads(text: str) -> tuple[Scene, dict[str, np.ndarray]]:
    payload = json.loads(text)
    return scene_from_dict(payload["scene"]), {k: grid_from_dict(v) for k, v in payload["grids"].items()}


# -- multi-agent samples -------------------------------------------------------

@dataclass
class Sample:
    """One scene observed by several agents.

    ``observations[name]`` has shape (n_agents, H, W): every modality is rendered
    from every agent's pose so the same viewpoint can be paired across modalities.
    """

    scene: Scene
    poses: list[Pose]
    observations: dict[str, np.ndarray]
    occupancy: np.ndarray  # (n_agents, Hs, Ws) at the standard footprint
    centers: list[np.ndarray]  # per agent, (k, 2) ego-frame centers inside the grid


def sample_poses(rng: np.random.Generator, n_agents: int, ego_box: float = 8.0,
                 min_sep: float = 12.0, max_sep: float = 20.0) -> list[Pose]:
    ego = Pose(*rng.uniform(-ego_box, ego_box, size=2), rng.uniform(-math.pi, math.pi))
    poses = [ego]
    for _ in range(n_agents - 1):
        r = rng.uniform(min_sep, max_sep)
        a = rng.uniform(-math.pi, math.pi)
        poses.append(Pose(ego.x + r * math.cos(a), ego.y + r * math.sin(a), rng.uniform(-math.pi, math.pi)))
    return poses


def ego_centers(scene: Scene, pose: Pose, extent: float) -> np.ndarray:
    objs = scene.array
    ex, ey = world_to_ego(pose, objs[:, 0], objs[:, 1])
    keep = (np.abs(ex) < extent) & (np.abs(ey) < extent)
    return np.stack([ex[keep], ey[keep]], axis=1)


def make_sample(seed: int, modalities: Sequence[ModalitySpec], label_grid: GridSpec,
                n_agents: int = 2, n_objects: tuple[int, int] = (5, 12),
                world_extent: float = 32.0) -> Sample:
    rng = np.random.default_rng([seed, 7919])
    n = int(rng.integers(n_objects[0], n_objects[1] + 1))
    scene = generate_scene(seed, n, world_extent)
    poses = sample_poses(rng, n_agents)
    # collaborators may wander past the world box; clamp so rendering preconditions hold
    poses = [Pose(float(np.clip(p.x, -world_extent, world_extent)),
                  float(np.clip(p.y, -world_extent, world_extent)), p.yaw) for p in poses]
    obs = {}
    for m in modalities:
        # keyed on the modality name so renders do not depend on list order
        key = zlib.crc32(m.name.encode())
        obs[m.name] = np.stack([
            render_observation(scene, p, m, seed=int(np.random.SeedSequence([seed, key, a]).generate_state(1)[0]),
                               grid_extent=label_grid.extent)
            for a, p in enumerate(poses)
        ])
    occ = np.stack([occupancy_labels(scene, p, label_grid).cells for p in poses]).astype(np.float32)
    centers = [ego_centers(scene, p, label_grid.extent) for p in poses]
    return Sample(scene=scene, poses=poses, observations=obs, occupancy=occ, centers=centers)


def make_dataset(n_scenes: int, seed: int, modalities: Sequence[ModalitySpec], label_grid: GridSpec,
                 n_agents: int = 2, **kwargs) -> list[Sample]:
    return [make_sample(seed * 100_003 + i, modalities, label_grid, n_agents, **kwargs) for i in range(n_scenes)]
