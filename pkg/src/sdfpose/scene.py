"""Synthetic multi-view scenes: ground-truth objects, pinhole cameras,
sphere-traced depth and instance masks, and the three-points-per-pixel
observation sampling used by the optimizer.

Pixel coordinates are normalized, ``p = ((col - cx) / f, (row - cy) / f)``,
and ``p_h = (p, 1)`` is the viewing ray in the optical frame. Depth maps hold
the optical-axis coordinate ``z`` of the first hit (0 where nothing is hit).

Label convention: of the two offset points on a ray, the one on the camera
side of the observed surface is outside the object and carries ``+eps``;
the one behind it carries ``-eps``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .lie import Sim3, random_rotation, exp_so3
from .quadric import CameraFrame
from .shapes import SuperShape

MAX_STEPS = 128
HIT_EPS = 1e-4
MAX_RANGE = 20.0
DEFAULT_EPSILON = 0.05
MAX_PIXELS_PER_VIEW = 3000


@dataclass(frozen=True)
class Intrinsics:
    width: int = 200
    height: int = 150
    focal: float = 220.0

    @property
    def cx(self) -> float:
        return (self.width - 1) / 2.0

    @property
    def cy(self) -> float:
        return (self.height - 1) / 2.0

    def normalized_grid(self) -> np.ndarray:
        """(H, W, 2) normalized coordinates of all pixel centers."""
        cols, rows = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([(cols - self.cx) / self.focal, (rows - self.cy) / self.focal], axis=-1)


@dataclass(frozen=True, eq=False)
class SceneObject:
    object_id: int
    class_id: str
    pose: Sim3  # world -> object
    shape: SuperShape

    @property
    def object_to_world(self) -> Sim3:
        return self.pose.inverse()

    @property
    def size(self) -> float:
        """Object-to-world scale factor."""
        return 1.0 / self.pose.scale

    def sdf_world(self, x) -> np.ndarray:
        return self.shape.sdf(self.pose.apply(np.atleast_2d(x))) * self.size

    def surface_points_world(self, n: int, rng) -> np.ndarray:
        p, _ = self.shape.sample_surface(n, rng)
        return self.object_to_world.apply(p)


@dataclass(frozen=True)
class NoiseModel:
    depth_sigma: float = 0.0
    mask_radius: int = 0  # > 0 dilates, < 0 erodes


@dataclass(frozen=True, eq=False)
class SceneSpec:
    objects: list
    cameras: list
    intrinsics: Intrinsics = Intrinsics()
    noise: NoiseModel = NoiseModel()
    seed: int = 0
    floor_height: float | None = None  # opaque plane z = h hiding what lies below

    def __post_init__(self):
        if not self.cameras:
            raise ValueError("a scene needs at least one camera")
        for o in self.objects:
            if not o.pose.scale > 0:
                raise ValueError("object scales must be positive")

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "seed": self.seed,
            "intrinsics": {"width": self.intrinsics.width, "height": self.intrinsics.height, "focal": self.intrinsics.focal},
            "noise": {"depth_sigma": self.noise.depth_sigma, "mask_radius": self.noise.mask_radius},
            "objects": [
                {"id": o.object_id, "class": o.class_id, "pose": o.pose.to_list(), "shape": o.shape.to_dict()}
                for o in self.objects
            ],
            "cameras": [{"id": c.view_id, "pose": c.pose.to_list()} for c in self.cameras],
            "floor_height": self.floor_height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objects = [
            SceneObject(o["id"], o["class"], Sim3.from_list(o["pose"]), SuperShape.from_dict(o["shape"]))
            for o in d["objects"]
        ]
        cameras = [CameraFrame(Sim3.from_list(c["pose"]), c["id"]) for c in d["cameras"]]
        return cls(objects, cameras, Intrinsics(**d["intrinsics"]), NoiseModel(**d["noise"]), d.get("seed", 0), d.get("floor_height"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(eq=False)
class RenderedView:
    view_id: int
    camera: CameraFrame
    depth: np.ndarray  # (H, W) z-depth, 0 = no hit
    masks: dict  # object id -> (H, W) bool
    skipped: bool = False


# ----------------------------------------------------------------- rendering


def _trace_floor(height: float, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Ray distances to the plane ``z = height`` seen from above (inf if missed)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (height - origin[2]) / dirs[:, 2]
    return np.where((origin[2] > height) & (dirs[:, 2] < 0) & (t > 0), t, np.inf)


def _trace_object(obj: SceneObject, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Distance along unit rays to the first hit of one object (inf if none)."""
    t_hit = np.full(len(dirs), np.inf)
    center = obj.object_to_world.translation
    radius = obj.shape.bounding_radius * obj.size * 1.01
    # ray / bounding sphere intersection gives the marching interval
    oc = origin - center
    b = dirs @ oc
    c = oc @ oc - radius**2
    disc = b * b - c
    cand = np.flatnonzero(disc > 0)
    if cand.size == 0:
        return t_hit
    sq = np.sqrt(disc[cand])
    t = np.maximum(-b[cand] - sq, 0.0)
    t_far = np.minimum(-b[cand] + sq, MAX_RANGE)
    active = t < t_far
    idx, t, t_far, d = cand[active], t[active], t_far[active], dirs[cand[active]]
    R, s = obj.pose.matrix[:3, :3], obj.size
    for _ in range(MAX_STEPS):
        if idx.size == 0:
            break
        x_obj = (origin + t[:, None] * d) @ R.T + obj.pose.translation
        dist = obj.shape.distance_bound(x_obj) * s
        hit = dist < HIT_EPS
        t_hit[idx[hit]] = t[hit]
        t = t + np.maximum(dist, 0.0)
        keep = ~hit & (t < t_far)
        idx, t, t_far, d = idx[keep], t[keep], t_far[keep], d[keep]
    # Newton refinement of the hit on the gauge level set g = 1
    hit_idx = np.flatnonzero(np.isfinite(t_hit))
    if hit_idx.size:
        th, d = t_hit[hit_idx], dirs[hit_idx]
        d_obj = d @ R.T
        for _ in range(4):
            x_obj = (origin + th[:, None] * d) @ R.T + obj.pose.translation
            g = obj.shape.gauge(x_obj)
            dg = np.einsum("ij,ij->i", obj.shape.gauge_grad(x_obj), d_obj)
            step = np.where(dg > 1e-9, (g - 1.0) / np.where(dg > 1e-9, dg, 1.0), 0.0)
            th = th - np.clip(step, -10 * HIT_EPS, 10 * HIT_EPS)
        t_hit[hit_idx] = th
    return t_hit


def render_view(spec: SceneSpec, camera: CameraFrame, rng: np.random.Generator) -> RenderedView:
    K = spec.intrinsics
    H, W = K.height, K.width
    grid = K.normalized_grid().reshape(-1, 2)
    rays = np.concatenate([grid, np.ones((len(grid), 1))], axis=1)
    norms = np.linalg.norm(rays, axis=1)
    R_c, origin = camera.pose.rotation, camera.pose.translation
    dirs = (rays / norms[:, None]) @ R_c.T

    inside = any(o.shape.gauge(o.pose.apply(origin[None]))[0] < 1.0 for o in spec.objects)
    if inside:
        return RenderedView(camera.view_id, camera, np.zeros((H, W)), {o.object_id: np.zeros((H, W), bool) for o in spec.objects}, True)

    hits = [_trace_object(o, origin, dirs) for o in spec.objects]
    if spec.floor_height is not None:
        hits.append(_trace_floor(spec.floor_height, origin, dirs))
    hits = np.stack(hits) if hits else np.full((1, len(dirs)), np.inf)
    nearest = np.argmin(hits, axis=0)
    t = hits[nearest, np.arange(len(dirs))]
    hit = np.isfinite(t)
    depth = np.where(hit, t / np.where(hit, norms, 1.0), 0.0)
    masks = {}
    for i, o in enumerate(spec.objects):
        m = (hit & (nearest == i)).reshape(H, W)
        r = spec.noise.mask_radius
        if r > 0:
            m = ndimage.binary_dilation(m, iterations=r)
        elif r < 0:
            m = ndimage.binary_erosion(m, iterations=-r)
        masks[o.object_id] = m
    depth = depth.reshape(H, W)
    if spec.noise.depth_sigma > 0:
        noise = rng.normal(scale=spec.noise.depth_sigma, size=depth.shape)
        depth = np.where(depth > 0, depth + noise, 0.0)
    return RenderedView(camera.view_id, camera, depth, masks)


def render_views(spec: SceneSpec) -> list[RenderedView]:
    """Depth maps and instance masks for every camera (deterministic per seed)."""
    rng = np.random.default_rng(spec.seed)
    return [render_view(spec, cam, rng) for cam in spec.cameras]


# ------------------------------------------------------------- observations


@dataclass(frozen=True)
class DistanceLabeledPoint:
    x: tuple
    d: float
    k: int
    p: tuple


@dataclass(eq=False)
class PointSet:
    """Distance-labelled world points, stored column-wise."""

    x: np.ndarray  # (N, 3)
    d: np.ndarray  # (N,)
    view: np.ndarray  # (N,) int
    pixel: np.ndarray  # (N, 2) int (row, col)
    skipped: int = 0

    @classmethod
    def empty(cls) -> "PointSet":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, int), np.zeros((0, 2), int))

    def __len__(self) -> int:
        return len(self.d)

    @classmethod
    def concat(cls, sets) -> "PointSet":
        sets = list(sets)
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.x for s in sets]),
            np.concatenate([s.d for s in sets]),
            np.concatenate([s.view for s in sets]),
            np.concatenate([s.pixel for s in sets]),
            sum(s.skipped for s in sets),
        )

    def subset(self, idx) -> "PointSet":
        return PointSet(self.x[idx], self.d[idx], self.view[idx], self.pixel[idx], self.skipped)

    def records(self):
        for x, d, k, p in zip(self.x, self.d, self.view, self.pixel):
            yield DistanceLabeledPoint(tuple(float(v) for v in x), float(d), int(k), (int(p[0]), int(p[1])))


def decimate(pixels: np.ndarray, limit: int | None) -> np.ndarray:
    if limit is None or len(pixels) <= limit:
        return pixels
    return pixels[:: math.ceil(len(pixels) / limit)]


def sample_observation(
    depth: np.ndarray,
    mask: np.ndarray,
    camera: CameraFrame,
    epsilon: float = DEFAULT_EPSILON,
    intrinsics: Intrinsics | None = None,
    max_pixels: int | None = MAX_PIXELS_PER_VIEW,
    normalized_coords: np.ndarray | None = None,
) -> PointSet:
    """Three labelled points per mask pixel: on the surface and ``eps`` in
    front of / behind it along the viewing ray.

    ``normalized_coords`` (H, W, 2) overrides the grid derived from
    ``intrinsics``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grid = normalized_coords if normalized_coords is not None else (intrinsics or Intrinsics()).normalized_grid()
    rows, cols = np.nonzero(mask)
    flat = decimate(np.stack([rows, cols], axis=1), max_pixels)
    D = depth[flat[:, 0], flat[:, 1]]
    good = D > 0
    skipped = int((~good).sum())
    flat, D = flat[good], D[good]
    p = grid[flat[:, 0], flat[:, 1]]
    ph = np.concatenate([p, np.ones((len(p), 1))], axis=1)
    inv_norm = 1.0 / np.linalg.norm(ph, axis=1)
    labels = np.array([0.0, epsilon, -epsilon])
    ys = [(D - lab * inv_norm)[:, None] * ph for lab in labels]
    y = np.stack(ys, axis=1).reshape(-1, 3)
    x = camera.pose.apply(y)
    n = len(D)
    return PointSet(
        x,
        np.tile(labels, n),
        np.full(3 * n, camera.view_id),
        np.repeat(flat, 3, axis=0),
        skipped,
    )


def observe_object(views, object_id: int, epsilon: float = DEFAULT_EPSILON, intrinsics=None, max_pixels=MAX_PIXELS_PER_VIEW) -> PointSet:
    sets = [
        sample_observation(v.depth, v.masks[object_id], v.camera, epsilon, intrinsics, max_pixels)
        for v in views
        if not v.skipped and v.masks[object_id].any()
    ]
    return PointSet.concat(sets)


def mask_points(view: RenderedView, object_id: int, intrinsics: Intrinsics) -> np.ndarray:
    """Normalized coordinates of the mask pixels of one object."""
    grid = intrinsics.normalized_grid()
    return grid[view.masks[object_id]]


def mask_truncated(mask: np.ndarray) -> bool:
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())


# ------------------------------------------------------------ scene builders


def ring_cameras(center, n_views: int, radius: float, height: float, rng=None, jitter: float = 0.0, arc=(0.0, 2 * np.pi)):
    """Cameras on a horizontal circle around ``center`` looking at it."""
    center = np.asarray(center, dtype=float)
    cams = []
    for k in range(n_views):
        a = arc[0] + (arc[1] - arc[0]) * (k + 0.5) / n_views
        eye = center + np.array([radius * math.cos(a), radius * math.sin(a), height])
        target = center.copy()
        if rng is not None and jitter > 0:
            target = target + rng.normal(scale=jitter, size=3)
        cams.append(CameraFrame.look_at(eye, target, view_id=k))
    return cams


def make_scene(
    shapes,
    n_views: int = 20,
    seed: int = 0,
    class_id: str = "superellipsoid",
    spacing: float = 2.6,
    size_range=(0.9, 1.3),
    noise: NoiseModel = NoiseModel(),
    intrinsics: Intrinsics = Intrinsics(),
    camera_radius: float = 6.0,
    camera_height: float = 3.0,
    camera_arc=(0.0, 2 * np.pi),
    floor_height: float | None = None,
) -> SceneSpec:
    """Objects on a row along x, upright up to a random yaw and a small tilt,
    watched by a ring of cameras spread over ``camera_arc`` (radians); a half
    circle leaves the far side of every object unobserved."""
    rng = np.random.default_rng(seed)
    objects = []
    n = len(shapes)
    for i, shape in enumerate(shapes):
        size = rng.uniform(*size_range)
        R = exp_so3([0, 0, rng.uniform(-np.pi, np.pi)]) @ exp_so3(rng.normal(scale=0.15, size=3))
        center = np.array([(i - (n - 1) / 2.0) * spacing, rng.normal(scale=0.2), 0.0])
        obj_to_world = Sim3.from_parts(size, R, center)
        objects.append(SceneObject(i, class_id, obj_to_world.inverse(), shape))
    radius = camera_radius + spacing * (n - 1) / 2.0
    cams = ring_cameras(np.zeros(3), n_views, radius, camera_height, rng, jitter=0.3, arc=camera_arc)
    return SceneSpec(objects, cams, intrinsics, noise, seed, floor_height)


# -------------------------------------------------------------- file formats


def write_pfm(path, image: np.ndarray) -> None:
    """Grayscale PFM, little-endian (negative scale), rows stored bottom-up."""
    img = np.asarray(image, dtype="<f4")
    H, W = img.shape
    header = f"Pf\n{W} {H}\n-1.0\n".encode()
    Path(path).write_bytes(header + np.flipud(img).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 3:
        end = data.index(b"\n", pos)
        parts.append(data[pos:end].decode().strip())
        pos = end + 1
    if parts[0] != "Pf":
        raise ValueError("only grayscale PFM is supported")
    W, H = (int(v) for v in parts[1].split())
    dtype = "<f4" if float(parts[2]) < 0 else ">f4"
    img = np.frombuffer(data, dtype=dtype, count=W * H, offset=pos).reshape(H, W)
    return np.flipud(img).astype(float)


def write_pgm(path, mask: np.ndarray) -> None:
    m = np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)
    H, W = m.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + m.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode())
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise ValueError("only binary PGM (P5) is supported")
    W, H = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data, np.uint8, W * H, pos).reshape(H, W) > 127


def write_observations(path, points: PointSet) -> None:
    lines = [
        json.dumps({"x": [float(v) for v in x], "d": float(d), "k": int(k), "p": [int(p[0]), int(p[1])]})
        for x, d, k, p in zip(points.x, points.d, points.view, points.pixel)
    ]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_observations(path) -> PointSet:
    recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not recs:
        return PointSet.empty()
    return PointSet(
        np.array([r["x"] for r in recs], dtype=float),
        np.array([r["d"] for r in recs], dtype=float),
        np.array([r["k"] for r in recs], dtype=int),
        np.array([r["p"] for r in recs], dtype=int),
    )


VIEWS_INDEX = "views.json"


def save_views(directory, views: list[RenderedView], intrinsics: Intrinsics) -> None:
    """Depth maps as ``view_KKK_depth.pfm``, masks as ``view_KKK_mask_OOO.pgm``
    and a ``views.json`` index with intrinsics and camera poses."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = {"intrinsics": {"width": intrinsics.width, "height": intrinsics.height, "focal": intrinsics.focal}, "views": []}
    for v in views:
        depth_name = f"view_{v.view_id:03d}_depth.pfm"
        write_pfm(d / depth_name, v.depth)
        masks = {}
        for oid in sorted(v.masks):
            name = f"view_{v.view_id:03d}_mask_{oid:03d}.pgm"
            write_pgm(d / name, v.masks[oid])
            masks[str(oid)] = name
        index["views"].append(
            {"id": v.view_id, "pose": v.camera.pose.to_list(), "skipped": v.skipped, "depth": depth_name, "masks": masks}
        )
    (d / VIEWS_INDEX).write_text(json.dumps(index, indent=1, sort_keys=True))


def load_views(directory) -> tuple[Intrinsics, list[RenderedView]]:
    d = Path(directory)
    index = json.loads((d / VIEWS_INDEX).read_text())
    views = []
    for rec in index["views"]:
        camera = CameraFrame(Sim3.from_list(rec["pose"]), rec["id"])
        masks = {int(k): read_pgm(d / name) for k, name in rec["masks"].items()}
        views.append(RenderedView(rec["id"], camera, read_pfm(d / rec["depth"]), masks, rec["skipped"]))
    return Intrinsics(**index["intrinsics"]), views
