"""Procedural multi-view scenes with exact ray-traced ground truth.

Scenes are colored axis-aligned boxes (plus optional textured backdrop planes)
living in the first camera's frame: camera 0 sits at the origin looking down
+z and the scene content is centered a fixed distance ahead, so pose-free
outputs and ground truth share one coordinate system. The tracer uses
closed-form ray/box and ray/plane intersections and is deliberately
independent of the splatting code paths.

Shading is view-independent (fixed light, optional 3D checkerboard albedo
modulation), so multi-view photometric supervision is exactly consistent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import load_array, save_array
from .geometry import look_at_rotation
from .raster import Camera

BACKGROUND_ID = -1
DEPTH_INF = np.float32(np.inf)
_LIGHT_DIR = np.array([0.35, -0.85, -0.4])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_AMBIENT = 0.65
_CHECKER_DARK = 0.55


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray
    object_id: int
    checker_cell: float = 0.0  # 3D checker cell size; 0 disables texture


@dataclass
class Plane:
    """Finite axis-aligned rectangle: fixed coordinate on `axis` at `offset`."""

    axis: int
    offset: float
    lo: np.ndarray  # 2 extents over the remaining axes (sorted order)
    hi: np.ndarray
    albedo: np.ndarray
    object_id: int
    checker_cell: float = 0.0
    facing: float = -1.0  # normal sign along `axis`


@dataclass
class SyntheticScene:
    boxes: list
    planes: list
    cameras: list
    center: np.ndarray
    half_extent: float
    seed: int
    spec: dict

    @property
    def n_objects(self) -> int:
        return len(self.boxes) + len(self.planes)

    def position_bound(self) -> float:
        """Farthest coordinate magnitude of the scene bounds from the canonical origin."""
        return float(np.max(np.abs(self.center)) + self.half_extent * np.sqrt(3.0))


@dataclass
class ViewRecord:
    image: np.ndarray
    depth: np.ndarray
    object_ids: np.ndarray
    camera: Camera


DEFAULT_SPEC = {
    "n_objects": 3,
    "texture_mode": "checker",
    "extent": 1.0,
    "n_cams": 12,
    "distance": 2.6,
    "arc_deg": 180.0,
    "rig": "paired",
    "width": 64,
    "height": 64,
    "fov_fit": 1.45,
}


def generate_scene(spec: dict, seed: int) -> SyntheticScene:
    """Deterministic scene from (spec, seed); camera 0 is the canonical identity pose."""
    cfg = dict(DEFAULT_SPEC)
    cfg.update(spec or {})
    n_objects = int(cfg["n_objects"])
    if not (1 <= n_objects <= 64):
        raise ValueError("n_objects must be in [1, 64]")
    extent = float(cfg["extent"])
    if extent <= 0:
        raise ValueError("scene extent must be positive")
    rng = np.random.default_rng(seed)
    dist = float(cfg["distance"]) * extent
    center = np.array([0.0, 0.0, dist])

    checker = cfg["texture_mode"] == "checker"
    palette = rng.permutation(
        np.array(
            [
                [0.92, 0.26, 0.21],
                [0.26, 0.62, 0.96],
                [0.35, 0.82, 0.35],
                [0.98, 0.76, 0.18],
                [0.67, 0.38, 0.88],
                [0.20, 0.80, 0.78],
                [0.95, 0.48, 0.60],
                [0.80, 0.86, 0.30],
            ]
        )
    )

    boxes = []
    for i in range(n_objects):
        size = rng.uniform(0.28, 0.62, 3) * extent
        pos = rng.uniform(-0.95, 0.95, 3) * (extent - size / 2.0)
        albedo = palette[i % len(palette)] * rng.uniform(0.85, 1.0)
        cell = rng.uniform(0.22, 0.4) * extent if checker else 0.0
        boxes.append(
            Box(
                lo=center + pos - size / 2.0,
                hi=center + pos + size / 2.0,
                albedo=albedo,
                object_id=i,
                checker_cell=cell,
            )
        )

    cameras = _build_rig(cfg, center, extent, rng)
    return SyntheticScene(
        boxes=boxes,
        planes=[],
        cameras=cameras,
        center=center,
        half_extent=extent,
        seed=int(seed),
        spec=cfg,
    )


def _build_rig(cfg: dict, center: np.ndarray, extent: float, rng) -> list:
    """Cameras on an arc around the scene center; camera 0 is straight-on."""
    n_cams = int(cfg["n_cams"])
    if n_cams < 2:
        raise ValueError("need at least two cameras")
    w, h = int(cfg["width"]), int(cfg["height"])
    dist = float(cfg["distance"]) * extent
    half_fov = np.arctan(float(cfg["fov_fit"]) * extent / dist)
    fx = (w / 2.0) / np.tan(half_fov)
    fy = fx
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    arc = np.radians(float(cfg["arc_deg"]))
    if cfg["rig"] == "paired":
        # clusters of two nearby cameras spread over the arc: pairs land in
        # every viewing-angle bin from a few degrees up to the full arc
        n_clusters = (n_cams + 1) // 2
        base = np.linspace(-arc / 2.0, arc / 2.0, n_clusters)
        offs = np.radians(9.0)
        yaws = []
        for b in base:
            yaws.append(b)
            if len(yaws) < n_cams:
                yaws.append(b + offs)
        yaws = np.array(yaws[:n_cams])
    else:
        yaws = np.linspace(-arc / 2.0, arc / 2.0, n_cams)

    # camera 0 must be the straight-on view: rotate the whole rig so the
    # first yaw is zero, then jitter elevations of the others only
    yaws = yaws - yaws[0]
    pitches = np.concatenate([[0.0], rng.uniform(-0.18, 0.18, n_cams - 1)])

    cams = []
    for k in range(n_cams):
        u = np.array(
            [
                np.sin(yaws[k]) * np.cos(pitches[k]),
                np.sin(pitches[k]),
                -np.cos(yaws[k]) * np.cos(pitches[k]),
            ]
        )
        eye = center + dist * u
        R = look_at_rotation(eye, center)
        t = -R @ eye
        cams.append(Camera(R, t, fx, fy, cx, cy, w, h))
    return cams


# -- ray tracing ----------------------------------------------------------------


def _ray_dirs(cam: Camera, px: np.ndarray, py: np.ndarray) -> tuple:
    """World-space origin and directions (camera-z parameterized) for pixel coords."""
    dx = (px - cam.cx) / cam.fx
    dy = (py - cam.cy) / cam.fy
    dirs_cam = np.stack([dx, dy, np.ones_like(dx)], axis=-1)
    dirs = dirs_cam @ cam.rotation  # R^T applied to rows
    origin = cam.center()
    return origin, dirs


def _intersect_box(box: Box, origin: np.ndarray, dirs: np.ndarray, near: float):
    """Slab test; returns (t, hit, axis) with t the camera-z depth of entry."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (box.lo - origin) * inv
        t2 = (box.hi - origin) * inv
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    tlo = np.where(np.isnan(tlo), -np.inf, tlo)
    thi = np.where(np.isnan(thi), np.inf, thi)
    tmin = tlo.max(axis=-1)
    tmax = thi.min(axis=-1)
    axis = tlo.argmax(axis=-1)
    hit = (tmax >= tmin) & (tmin > near)
    return np.where(hit, tmin, np.inf), hit, axis


def _intersect_plane(pl: Plane, origin: np.ndarray, dirs: np.ndarray, near: float):
    k = pl.axis
    others = [a for a in range(3) if a != k]
    dk = dirs[..., k]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (pl.offset - origin[k]) / dk
    pt0 = origin[others[0]] + t * dirs[..., others[0]]
    pt1 = origin[others[1]] + t * dirs[..., others[1]]
    hit = (
        np.isfinite(t)
        & (t > near)
        & (pt0 >= pl.lo[0])
        & (pt0 <= pl.hi[0])
        & (pt1 >= pl.lo[1])
        & (pt1 <= pl.hi[1])
    )
    return np.where(hit, t, np.inf), hit


def trace_rays(scene: SyntheticScene, cam: Camera, px: np.ndarray, py: np.ndarray):
    """Nearest-hit trace through arbitrary pixel coordinates.

    Returns (color, depth, ids) flattened over the input coordinate arrays.
    """
    shape = px.shape
    origin, dirs = _ray_dirs(cam, px.reshape(-1).astype(np.float64), py.reshape(-1).astype(np.float64))
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_id = np.full(n, BACKGROUND_ID, dtype=np.int32)
    color = np.zeros((n, 3))

    for box in scene.boxes:
        t, hit, axis = _intersect_box(box, origin, dirs, cam.near)
        closer = hit & (t < best_t)
        if not np.any(closer):
            continue
        idx = np.nonzero(closer)[0]
        pts = origin[None, :] + t[idx, None] * dirs[idx]
        normals = np.zeros((idx.size, 3))
        ax = axis[idx]
        normals[np.arange(idx.size), ax] = -np.sign(dirs[idx, ax])
        shade_lam = _AMBIENT + (1.0 - _AMBIENT) * np.maximum(0.0, -(normals @ _LIGHT_DIR))
        c = box.albedo[None, :] * shade_lam[:, None]
        if box.checker_cell > 0:
            parity = np.floor(pts / box.checker_cell).sum(axis=-1).astype(np.int64) % 2
            c = c * np.where(parity[:, None] == 0, 1.0, _CHECKER_DARK)
        color[idx] = c
        best_t[idx] = t[idx]
        best_id[idx] = box.object_id

    for pl in scene.planes:
        t, hit = _intersect_plane(pl, origin, dirs, cam.near)
        closer = hit & (t < best_t)
        if not np.any(closer):
            continue
        idx = np.nonzero(closer)[0]
        pts = origin[None, :] + t[idx, None] * dirs[idx]
        normal = np.zeros(3)
        normal[pl.axis] = pl.facing
        lam = _AMBIENT + (1.0 - _AMBIENT) * max(0.0, -(normal @ _LIGHT_DIR))
        c = np.tile(pl.albedo[None, :] * lam, (idx.size, 1))
        if pl.checker_cell > 0:
            parity = np.floor(pts / pl.checker_cell).sum(axis=-1).astype(np.int64) % 2
            c = c * np.where(parity[:, None] == 0, 1.0, _CHECKER_DARK)
        color[idx] = c
        best_t[idx] = t[idx]
        best_id[idx] = pl.object_id

    return (
        np.clip(color, 0.0, 1.0).reshape(shape + (3,)).astype(np.float32),
        best_t.reshape(shape).astype(np.float32),
        best_id.reshape(shape),
    )


def trace_ground_truth(scene: SyntheticScene, cam: Camera) -> ViewRecord:
    """Exact image / depth / object-id maps for one camera."""
    px, py = np.meshgrid(np.arange(cam.width, dtype=np.float64), np.arange(cam.height, dtype=np.float64))
    color, depth, ids = trace_rays(scene, cam, px, py)
    return ViewRecord(color, depth, ids, cam)


# -- synthetic features -----------------------------------------------------------


def _camera_key(cam: Camera) -> int:
    payload = np.round(np.concatenate([cam.rotation.reshape(-1), cam.translation]), 9).tobytes()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def synth_features(
    scene: SyntheticScene, cam: Camera, dim: int, noise_std: float, seed: int, patch: int = 8
) -> np.ndarray:
    """Per-patch one-hot object features plus per-view Gaussian noise.

    Slot 0 encodes background; object k uses slot k+1, so dim must be at
    least n_objects + 1. The noise stream is derived from (seed, camera), so
    the same patch seen from two cameras gets independent noise.
    """
    if dim < scene.n_objects + 1:
        raise ValueError("feature dim must be >= n_objects + 1")
    h, w = cam.height // patch, cam.width // patch
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    px = (jj + 0.5) * patch - 0.5
    py = (ii + 0.5) * patch - 0.5
    _, _, ids = trace_rays(scene, cam, px, py)
    feats = np.zeros((h, w, dim), dtype=np.float32)
    slot = np.where(ids >= 0, ids + 1, 0)
    for s in range(dim):
        feats[..., s] = slot == s
    if noise_std > 0:
        rng = np.random.default_rng([int(seed), _camera_key(cam)])
        feats = feats + rng.normal(0.0, noise_std, feats.shape).astype(np.float32)
    return feats


# -- image and dataset IO ----------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255) from a float image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected HxWx3 image")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must be in [0, 1]")
    h, w = image.shape[:2]
    data = np.rint(image * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"not a binary PPM: magic {magic!r}")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        w, h = (int(v) for v in line.split())
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError("only maxval 255 supported")
        raw = fh.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise ValueError("truncated PPM payload")
    return (np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float32)) / 255.0


def write_grayscale_ppm(path, image: np.ndarray) -> None:
    write_ppm(path, np.repeat(np.clip(image, 0.0, 1.0)[..., None], 3, axis=2))


def save_cameras(path, cams: list) -> None:
    """One line per camera: 9 rotation + 3 translation + fx fy cx cy + W H."""
    with open(path, "w", encoding="utf-8") as fh:
        for c in cams:
            vals = list(c.rotation.reshape(-1)) + list(c.translation) + [c.fx, c.fy, c.cx, c.cy, c.width, c.height]
            fh.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def load_cameras(path) -> list:
    cams = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            v = [float(x) for x in line.split()]
            if len(v) != 18:
                raise ValueError("camera line must have 18 values")
            cams.append(
                Camera(np.array(v[:9]).reshape(3, 3), np.array(v[9:12]), v[12], v[13], v[14], v[15], int(v[16]), int(v[17]))
            )
    return cams


def dataset_export(scene: SyntheticScene, out_dir) -> str:
    """Write views/depth/ids/cams/manifest; deterministic function of (spec, seed)."""
    out = Path(out_dir)
    for sub in ("views", "depth", "ids"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for k, cam in enumerate(scene.cameras):
        rec = trace_ground_truth(scene, cam)
        write_ppm(out / "views" / f"{k:04d}.ppm", rec.image)
        save_array(out / "depth" / f"{k:04d}.bin", rec.depth.astype(np.float32))
        save_array(out / "ids" / f"{k:04d}.bin", rec.object_ids.astype(np.int32))
    save_cameras(out / "cams.txt", scene.cameras)
    manifest = out / "manifest.txt"
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write(f"seed = {scene.seed}\n")
        for k in sorted(scene.spec):
            fh.write(f"{k} = {scene.spec[k]}\n")
    return str(manifest)


def dataset_import(out_dir) -> tuple:
    """Load cameras + per-view records written by `dataset_export`."""
    out = Path(out_dir)
    cams = load_cameras(out / "cams.txt")
    records = []
    for k, cam in enumerate(cams):
        image = read_ppm(out / "views" / f"{k:04d}.ppm")
        depth = load_array(out / "depth" / f"{k:04d}.bin")
        ids = load_array(out / "ids" / f"{k:04d}.bin")
        records.append(ViewRecord(image, depth, ids, cam))
    return cams, records
