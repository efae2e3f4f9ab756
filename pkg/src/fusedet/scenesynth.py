"""Procedural paired-view scenes with a hidden cross-view mapping.

Each scene holds objects in a metric bird's-eye frame plus a projection
(focal length, principal offset, mount rotation and translation) that maps
them into the camera view.  The projection is sampled once per dataset,
drives rendering and the evaluator-side correspondence oracle, and is never
exposed through :class:`SensorPair` or any other model-facing type.

BEV grid: 64x64 cells of 0.8 m over x in [0, 51.2) (forward), y in
[-25.6, 25.6) (lateral); the ego vehicle sits at the x=0 edge facing +x.
Camera image: 32x96 RGB.  Distant objects lose BEV occupancy cells
(keep probability 1 - x/60) while staying fully visible in the camera,
which is what makes the camera branch worth fusing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

BEV_CELLS = 64
BEV_CELL_SIZE = 0.8
BEV_RANGE_X = BEV_CELLS * BEV_CELL_SIZE          # 51.2 m
BEV_HALF_Y = BEV_RANGE_X / 2.0                   # 25.6 m
BEV_SHAPE = (BEV_CELLS, BEV_CELLS, 2)

IMAGE_H, IMAGE_W = 32, 96
CAMERA_SHAPE = (IMAGE_H, IMAGE_W, 3)

HORIZON_V = 10.0
GROUND_SCALE = 30.0           # v_bottom = HORIZON_V + GROUND_SCALE / depth
# sized so an object at the far range limit still spans ~2 pixels: the
# camera keeps seeing what range-dropout erases from the BEV grid
VERTICAL_FOCAL = 60.0
BASE_FOCAL = IMAGE_W / 2.0 / math.tan(math.radians(55.0))

BEHIND_CAMERA_DEPTH = 0.5     # objects at depth <= this drop from 2D annotations
BEV_NOISE_SIGMA = 0.05
DROPOUT_FULL_RANGE = 60.0     # occupancy keep probability = 1 - x / 60


@dataclass
class SceneObject:
    category: str             # "vehicle" | "pedestrian"
    x: float                  # forward, meters
    y: float                  # lateral, meters
    length: float
    width: float
    yaw: float                # radians
    appearance_seed: int


@dataclass
class HiddenProjection:
    """Evaluator-side view mapping; never shown to the model."""

    focal: float
    principal: float
    rotation: float           # mount yaw, radians
    tx: float
    ty: float

    def camera_frame(self, x, y):
        cr, sr = math.cos(self.rotation), math.sin(self.rotation)
        dx, dy = x - self.tx, y - self.ty
        return cr * dx + sr * dy, -sr * dx + cr * dy

    def project_u(self, x, y):
        """Horizontal image coordinate, or None when behind the camera."""
        depth, lateral = self.camera_frame(x, y)
        if depth <= 0.0:
            return None
        return self.focal * (lateral / depth) + self.principal


@dataclass
class Scene:
    objects: list
    projection: HiddenProjection
    seed: int


@dataclass
class Box2d:
    category: str
    u: float                  # center, pixels
    v: float
    w: float
    h: float


@dataclass
class SensorPair:
    """Model-facing observation; carries no projection information."""

    bev: np.ndarray           # (64, 64, 2): occupancy, max-height proxy
    camera: np.ndarray        # (32, 96, 3)
    bev_annotations: list = field(default_factory=list)   # SceneObject
    boxes_2d: list = field(default_factory=list)          # Box2d


@dataclass
class DifficultyParams:
    min_objects: int = 1
    max_objects: int = 8
    vehicle_fraction: float = 0.75
    max_azimuth_deg: float = 50.0
    min_x: float = 2.0
    max_x: float = 50.0
    max_abs_y: float = 24.0
    min_center_distance: float = 2.4
    max_attempts: int = 1000


VEHICLE_SIZE = ((3.5, 5.5), (1.6, 2.2))
PEDESTRIAN_SIZE = ((0.4, 0.9), (0.4, 0.9))


def sample_projection(rng):
    return HiddenProjection(
        focal=BASE_FOCAL * rng.uniform(0.9, 1.1),
        principal=IMAGE_W / 2.0 + rng.uniform(-6.0, 6.0),
        rotation=math.radians(rng.uniform(-10.0, 10.0)),
        tx=rng.uniform(-1.0, 1.0),
        ty=rng.uniform(-1.0, 1.0),
    )


def canonical_projection():
    """Identity-mount projection, for tests and geometry sanity checks."""
    return HiddenProjection(focal=BASE_FOCAL, principal=IMAGE_W / 2.0,
                            rotation=0.0, tx=0.0, ty=0.0)


def _object_radius(obj):
    return math.hypot(obj.length, obj.width) / 2.0


def sample_scene(seed, difficulty=None, projection=None):
    """Deterministically sample a non-overlapping object arrangement."""
    difficulty = difficulty or DifficultyParams()
    rng = np.random.default_rng([seed, 0x5CE7E])
    if projection is None:
        projection = sample_projection(rng)
    count = int(rng.integers(difficulty.min_objects, difficulty.max_objects + 1)) \
        if difficulty.max_objects > 0 else 0
    tan_az = math.tan(math.radians(difficulty.max_azimuth_deg))

    objects = []
    attempts = 0
    while len(objects) < count:
        if attempts >= difficulty.max_attempts:
            raise RuntimeError(
                f"scene sampling exhausted {difficulty.max_attempts} attempts "
                f"for difficulty {difficulty}")
        attempts += 1
        category = "vehicle" if rng.random() < difficulty.vehicle_fraction \
            else "pedestrian"
        (lmin, lmax), (wmin, wmax) = VEHICLE_SIZE if category == "vehicle" \
            else PEDESTRIAN_SIZE
        x = rng.uniform(difficulty.min_x, difficulty.max_x)
        y_bound = min(difficulty.max_abs_y, x * tan_az)
        obj = SceneObject(
            category=category,
            x=x,
            y=rng.uniform(-y_bound, y_bound),
            length=rng.uniform(lmin, lmax),
            width=rng.uniform(wmin, wmax),
            yaw=rng.uniform(0.0, 2.0 * math.pi),
            appearance_seed=int(rng.integers(0, 2 ** 31)),
        )
        separation_ok = all(
            math.hypot(obj.x - o.x, obj.y - o.y)
            > max(difficulty.min_center_distance,
                  _object_radius(obj) + _object_radius(o) + 0.2)
            for o in objects)
        if separation_ok:
            objects.append(obj)
    return Scene(objects=objects, projection=projection, seed=seed)


# -- rendering ----------------------------------------------------------------

def _object_height(obj):
    unit = (obj.appearance_seed % 997) / 996.0
    if obj.category == "vehicle":
        return 1.4 + 0.6 * unit
    return 1.5 + 0.4 * unit


def _footprint_cells(obj):
    """(iy, ix) arrays of BEV cells whose centers lie inside the footprint."""
    radius = _object_radius(obj)
    x0 = max(0, int((obj.x - radius) / BEV_CELL_SIZE))
    x1 = min(BEV_CELLS - 1, int((obj.x + radius) / BEV_CELL_SIZE))
    y0 = max(0, int((obj.y + BEV_HALF_Y - radius) / BEV_CELL_SIZE))
    y1 = min(BEV_CELLS - 1, int((obj.y + BEV_HALF_Y + radius) / BEV_CELL_SIZE))
    if x1 < x0 or y1 < y0:
        return np.empty(0, int), np.empty(0, int)
    iy, ix = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    cx = (ix + 0.5) * BEV_CELL_SIZE
    cy = (iy + 0.5) * BEV_CELL_SIZE - BEV_HALF_Y
    cos_t, sin_t = math.cos(obj.yaw), math.sin(obj.yaw)
    local_u = cos_t * (cx - obj.x) + sin_t * (cy - obj.y)
    local_v = -sin_t * (cx - obj.x) + cos_t * (cy - obj.y)
    inside = (np.abs(local_u) <= obj.length / 2.0) & (np.abs(local_v) <= obj.width / 2.0)
    return iy[inside], ix[inside]


def _camera_box(obj, projection):
    """(u, v, w, h, depth) of the rendered rectangle, or None when behind."""
    depth, lateral = projection.camera_frame(obj.x, obj.y)
    if depth <= BEHIND_CAMERA_DEPTH:
        return None
    u = projection.focal * (lateral / depth) + projection.principal
    azimuth = math.atan2(lateral, depth)
    rel = obj.yaw - projection.rotation - azimuth
    apparent_w = abs(obj.length * math.sin(rel)) + abs(obj.width * math.cos(rel))
    apparent_w = max(apparent_w, 0.35)
    w = projection.focal * apparent_w / depth
    h = VERTICAL_FOCAL * _object_height(obj) / depth
    v_bottom = HORIZON_V + GROUND_SCALE / depth
    return u, v_bottom - h / 2.0, w, h, depth


def render_pair(scene: Scene) -> SensorPair:
    """Rasterize a scene into the BEV grid and the camera image.

    Deterministic in the scene (same seed -> byte-identical tensors).
    """
    rng = np.random.default_rng([scene.seed, 0x4E4D3])
    bev = np.zeros(BEV_SHAPE, dtype=np.float32)
    camera = np.zeros(CAMERA_SHAPE, dtype=np.float32)
    camera[:int(HORIZON_V)] = 0.35      # sky
    camera[int(HORIZON_V):] = 0.15      # ground

    for obj in scene.objects:
        iy, ix = _footprint_cells(obj)
        if iy.size:
            keep_prob = np.clip(1.0 - (ix + 0.5) * BEV_CELL_SIZE / DROPOUT_FULL_RANGE,
                                0.0, 1.0)
            kept = rng.random(iy.size) < keep_prob
            height = _object_height(obj)
            bev[iy[kept], ix[kept], 0] = 1.0
            np.maximum.at(bev[:, :, 1], (iy[kept], ix[kept]), height)

    boxes = []
    drawn = []
    for obj in scene.objects:
        cam = _camera_box(obj, scene.projection)
        if cam is None:
            continue
        u, v, w, h, depth = cam
        if u + w / 2.0 <= 0 or u - w / 2.0 >= IMAGE_W:
            continue
        if v + h / 2.0 <= 0 or v - h / 2.0 >= IMAGE_H:
            continue
        boxes.append((depth, Box2d(obj.category, u, v, w, h)))
        drawn.append((depth, obj, u, v, w, h))

    # painter's algorithm: far objects first, near ones overdraw
    for depth, obj, u, v, w, h in sorted(drawn, key=lambda d: -d[0]):
        arng = np.random.default_rng([obj.appearance_seed, 0xA99])
        base = arng.uniform(0.3, 1.0, size=3)
        period = arng.uniform(2.0, 6.0)
        phase = arng.uniform(0.0, 2.0 * math.pi)
        u0 = max(0, int(math.floor(u - w / 2.0)))
        u1 = min(IMAGE_W, max(int(math.ceil(u + w / 2.0)), u0 + 1))
        v0 = max(0, int(math.floor(v - h / 2.0)))
        v1 = min(IMAGE_H, max(int(math.ceil(v + h / 2.0)), v0 + 1))
        if u1 <= u0 or v1 <= v0:
            continue
        uu = np.arange(u0, u1)
        stripe = 0.75 + 0.25 * np.cos(2.0 * math.pi * uu / period + phase)
        camera[v0:v1, u0:u1, :] = base[None, None, :] * stripe[None, :, None]

    # keep only annotations whose 2D-head center cell is not occluded
    head_cell = IMAGE_W // 48  # 2 px per 2D-head cell (48 cols, 16 rows)
    taken = set()
    boxes_2d = []
    for depth, box in sorted(boxes, key=lambda d: d[0]):
        cell = (int(box.v // head_cell), int(box.u // head_cell))
        if cell in taken:
            continue
        taken.add(cell)
        boxes_2d.append(box)

    bev += rng.normal(0.0, BEV_NOISE_SIGMA, bev.shape).astype(np.float32)
    camera += rng.normal(0.0, BEV_NOISE_SIGMA, camera.shape).astype(np.float32)
    return SensorPair(bev=bev, camera=camera,
                      bev_annotations=list(scene.objects), boxes_2d=boxes_2d)


# -- augmentation -------------------------------------------------------------

def _wrap_angle(theta):
    wrapped = math.fmod(theta, 2.0 * math.pi)
    return wrapped + 2.0 * math.pi if wrapped < 0.0 else wrapped


def augment_mirror(pair: SensorPair) -> SensorPair:
    """Horizontal mirror of both views; an involution on pairs and labels."""
    bev = pair.bev[::-1].copy()                  # flip lateral (y) axis
    camera = pair.camera[:, ::-1].copy()
    bev_ann = [SceneObject(o.category, o.x, -o.y, o.length, o.width,
                           _wrap_angle(-o.yaw), o.appearance_seed)
               for o in pair.bev_annotations]
    boxes = [Box2d(b.category, IMAGE_W - b.u, b.v, b.w, b.h)
             for b in pair.boxes_2d]
    return SensorPair(bev=bev, camera=camera, bev_annotations=bev_ann,
                      boxes_2d=boxes)


def _bilinear_sample(grid, ys, xs):
    """Sample (H, W, C) at float (row, col) coords with zero fill outside."""
    h, w = grid.shape[:2]
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]

    def fetch(iy, ix):
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        out = np.zeros(iy.shape + (grid.shape[2],), dtype=grid.dtype)
        out[valid] = grid[iy[valid], ix[valid]]
        return out

    top = fetch(y0, x0) * (1 - fx) + fetch(y0, x0 + 1) * fx
    bottom = fetch(y0 + 1, x0) * (1 - fx) + fetch(y0 + 1, x0 + 1) * fx
    return top * (1 - fy) + bottom * fy


def rigid_transform_bev(bev, rotation, tx, ty):
    """Rotate about the ego origin and translate, resampling bilinearly."""
    iy, ix = np.mgrid[0:BEV_CELLS, 0:BEV_CELLS]
    gx = (ix + 0.5) * BEV_CELL_SIZE
    gy = (iy + 0.5) * BEV_CELL_SIZE - BEV_HALF_Y
    cr, sr = math.cos(rotation), math.sin(rotation)
    # inverse transform of each target cell center
    sx = cr * (gx - tx) + sr * (gy - ty)
    sy = -sr * (gx - tx) + cr * (gy - ty)
    rows = (sy + BEV_HALF_Y) / BEV_CELL_SIZE - 0.5
    cols = sx / BEV_CELL_SIZE - 0.5
    return _bilinear_sample(bev, rows, cols).astype(bev.dtype)


def augment_rigid(pair: SensorPair, max_rot_deg, max_trans_m, rng) -> SensorPair:
    """Random rigid motion of the BEV grid only (simulated mount error).

    Camera view and 2D labels stay fixed; BEV annotations move with the grid.
    """
    if not 0.0 <= max_rot_deg <= 180.0:
        raise ValueError(f"max_rot_deg must be in [0, 180], got {max_rot_deg}")
    if max_trans_m < 0.0:
        raise ValueError(f"max_trans_m must be >= 0, got {max_trans_m}")
    rotation = math.radians(rng.uniform(-max_rot_deg, max_rot_deg))
    angle = rng.uniform(0.0, 2.0 * math.pi)
    mag = rng.uniform(0.0, max_trans_m)
    tx, ty = mag * math.cos(angle), mag * math.sin(angle)
    if rotation == 0.0 and tx == 0.0 and ty == 0.0:
        return pair
    bev = rigid_transform_bev(pair.bev, rotation, tx, ty)
    cr, sr = math.cos(rotation), math.sin(rotation)
    bev_ann = [SceneObject(o.category,
                           cr * o.x - sr * o.y + tx,
                           sr * o.x + cr * o.y + ty,
                           o.length, o.width,
                           _wrap_angle(o.yaw + rotation), o.appearance_seed)
               for o in pair.bev_annotations]
    return SensorPair(bev=bev, camera=pair.camera, bev_annotations=bev_ann,
                      boxes_2d=pair.boxes_2d)


# -- correspondence oracle (evaluator side only) ------------------------------

def _bev_cell_center(iy, ix):
    return (ix + 0.5) * BEV_CELL_SIZE, (iy + 0.5) * BEV_CELL_SIZE - BEV_HALF_Y


def correspondence_region(scene: Scene, query, pool_size):
    """Pooled-token indices in the *other* view matching a query location.

    ``query`` is ("bev", iy, ix) for a BEV grid cell or ("camera", iu) for a
    pixel column.  Returns a sorted list of flat indices into the other
    view's pool_size x pool_size token grid; empty when the query maps
    outside the other view.
    """
    proj = scene.projection
    kind = query[0]
    if kind == "bev":
        _, iy, ix = query
        if not (0 <= iy < BEV_CELLS and 0 <= ix < BEV_CELLS):
            raise ValueError(f"BEV cell ({iy}, {ix}) outside the grid")
        us = []
        for dy in (0.0, 1.0):
            for dx in (0.0, 1.0):
                x = (ix + dx) * BEV_CELL_SIZE
                y = (iy + dy) * BEV_CELL_SIZE - BEV_HALF_Y
                u = proj.project_u(x, y)
                if u is not None:
                    us.append(u)
        if not us:
            return []
        col_w = IMAGE_W / pool_size
        lo = int(np.clip(min(us) // col_w, 0, pool_size - 1))
        hi = int(np.clip((max(us) - 1e-9) // col_w, 0, pool_size - 1))
        if max(us) <= 0.0 or min(us) >= IMAGE_W:
            return []
        return sorted(r * pool_size + c
                      for c in range(lo, hi + 1)
                      for r in range(pool_size))
    if kind == "camera":
        _, iu = query
        if not 0 <= iu < IMAGE_W:
            raise ValueError(f"camera column {iu} outside the image")
        block = BEV_CELLS // pool_size
        tokens = set()
        for iy in range(BEV_CELLS):
            for ix in range(BEV_CELLS):
                x, y = _bev_cell_center(iy, ix)
                u = proj.project_u(x, y)
                if u is not None and iu <= u < iu + 1:
                    tokens.add((iy // block) * pool_size + ix // block)
        return sorted(tokens)
    raise ValueError(f"unknown query kind {kind!r}")


# -- dataset plumbing ----------------------------------------------------------

_SPLIT_IDS = {"train": 1, "val": 2, "test": 3}


def scene_seed(master_seed, split, index):
    ss = np.random.SeedSequence([master_seed, _SPLIT_IDS[split], index])
    return int(ss.generate_state(1, np.uint64)[0] % (2 ** 63))


def dataset_projection(master_seed):
    """The per-dataset hidden mounting, fixed across all splits."""
    return sample_projection(np.random.default_rng([master_seed, 0xB207]))


def write_manifest(path, master_seed, split_sizes, difficulty=None):
    """One JSON object per line: {seed, split, objects}; tensors stay virtual."""
    difficulty = difficulty or DifficultyParams()
    projection = dataset_projection(master_seed)
    with open(path, "w", encoding="utf-8") as fh:
        for split, size in split_sizes.items():
            for i in range(size):
                seed = scene_seed(master_seed, split, i)
                scene = sample_scene(seed, difficulty, projection)
                fh.write(json.dumps({"seed": seed, "split": split,
                                     "objects": len(scene.objects)}) + "\n")


def load_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
