"""Synthetic ground-truth scenes, sensor rendering and BEV projection.

A desk-scale stand-in for a real driving dataset: oriented 2D boxes in an
ego-centered square region, a radial beam-cast LiDAR sweep, and K
polar-image camera views whose depth is deliberately noisier than LiDAR.
Dataset persistence uses a versioned binary container ("BFD1").
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .fusion import BevGrid, Modality
from .tensor import Tensor

_LIDAR_SALT = 0x4C
_CAMERA_SALT = 0xCA


def _f32(x) -> float:
    """Quantize to float32 so scenes survive dataset round-trips bit-exactly."""
    return float(np.float32(x))


class GenerationError(RuntimeError):
    """Scene generation could not satisfy its constraints."""


class DatasetFormatError(ValueError):
    """A dataset file is malformed (magic, truncation, trailing bytes)."""


@dataclass(frozen=True)
class WorldConfig:
    extent_m: float = 16.0
    num_beams: int = 32
    rays_per_beam: int = 8
    clutter_points: int = 48
    num_views: int = 6
    view_h: int = 32
    view_w: int = 48
    fov_deg: float = 70.0
    depth_sigma_m: float = 1.0
    num_classes: int = 3
    boxes_min: int = 1
    boxes_max: int = 8
    size_min_m: float = 1.2
    size_max_m: float = 4.0
    speed_max: float = 3.0
    iou_cap: float = 0.02
    place_retries: int = 100


@dataclass(frozen=True)
class GridConfig:
    h: int = 64
    w: int = 64
    c: int = 32
    cell_size_m: float = 0.5

    @property
    def extent_x(self) -> float:
        return self.w * self.cell_size_m / 2.0

    @property
    def extent_y(self) -> float:
        return self.h * self.cell_size_m / 2.0


@dataclass
class ObjectBox:
    center_xy: tuple[float, float]
    size_lw: tuple[float, float]
    yaw: float
    class_id: int
    velocity_xy: tuple[float, float] = (0.0, 0.0)

    def corners(self) -> np.ndarray:
        """Footprint corners, counter-clockwise, shape (4, 2)."""
        l, w = self.size_lw
        cx, cy = self.center_xy
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[l / 2, w / 2], [-l / 2, w / 2],
                          [-l / 2, -w / 2], [l / 2, -w / 2]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([cx, cy])


@dataclass
class Scene:
    boxes: list[ObjectBox]
    seed: int
    extent_m: float


@dataclass
class LidarSweep:
    xy: np.ndarray          # (N, 2) float32
    intensity: np.ndarray   # (N,) float32
    beam: np.ndarray        # (N,) int32
    num_beams: int

    @property
    def num_points(self) -> int:
        return int(self.xy.shape[0])


@dataclass
class CameraStream:
    views: np.ndarray       # (K, H, W) float32
    yaws: np.ndarray        # (K,) float32, view center azimuth
    fov_rad: float
    depth_max_m: float

    @property
    def num_views(self) -> int:
        return int(self.views.shape[0])


@dataclass
class Sample:
    scene: Scene
    sweep: LidarSweep
    stream: CameraStream


# ---------------------------------------------------------------------------
# geometry helpers


def _poly_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_poly(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon against a convex polygon."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        inp, out = out, []
        if not inp:
            break

        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0

        for j, cur in enumerate(inp):
            prev = inp[j - 1]
            cur_in, prev_in = inside(cur), inside(prev)
            if cur_in != prev_in:
                d = cur - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                t = (edge[1] * (prev[0] - a[0]) - edge[0] * (prev[1] - a[1])) / denom
                out.append(prev + t * d)
            if cur_in:
                out.append(cur)
    return np.array(out) if out else np.zeros((0, 2))


def footprint_iou(b1: ObjectBox, b2: ObjectBox) -> float:
    p1, p2 = b1.corners(), b2.corners()
    inter = _clip_poly(p1, p2)
    ai = _poly_area(inter) if len(inter) >= 3 else 0.0
    a1, a2 = _poly_area(p1), _poly_area(p2)
    union = a1 + a2 - ai
    return ai / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# scene generation


def sample_scene(rng_seed: int, config: WorldConfig) -> Scene:
    rng = np.random.default_rng(rng_seed)
    n = int(rng.integers(config.boxes_min, config.boxes_max + 1))
    boxes: list[ObjectBox] = []
    lo = -0.8 * config.extent_m
    hi = 0.8 * config.extent_m
    for _ in range(n):
        placed = False
        for _ in range(config.place_retries):
            cx, cy = rng.uniform(lo, hi, size=2)
            l = _f32(rng.uniform(config.size_min_m, config.size_max_m))
            w = _f32(rng.uniform(config.size_min_m, config.size_max_m))
            yaw = _f32(math.pi - rng.uniform(0.0, 2 * math.pi))
            cls = int(rng.integers(0, config.num_classes))
            speed = float(rng.uniform(0.0, config.speed_max))
            vdir = float(rng.uniform(0.0, 2 * math.pi))
            box = ObjectBox((_f32(cx), _f32(cy)), (l, w), yaw, cls,
                            (_f32(speed * math.cos(vdir)),
                             _f32(speed * math.sin(vdir))))
            if all(footprint_iou(box, other) <= config.iou_cap
                   for other in boxes):
                boxes.append(box)
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place box {len(boxes)} within "
                f"{config.place_retries} retries (seed {rng_seed})")
    return Scene(boxes=boxes, seed=int(rng_seed), extent_m=_f32(config.extent_m))


# ---------------------------------------------------------------------------
# sensor rendering


def _class_intensity(class_id: int, num_classes: int) -> float:
    # distinct intensity bands per class so the grids carry class evidence
    return 0.45 + 0.45 * (class_id + 1) / num_classes


def _ray_box_span(box: ObjectBox, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Entry/exit distances of origin rays through a box footprint.

    dirs is (R, 2) unit vectors. Returns (hit_mask, t0, t1).
    """
    cx, cy = box.center_xy
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s], [-s, c]])  # world -> box frame
    o = rot @ np.array([-cx, -cy])
    d = dirs @ rot.T
    half = np.array([box.size_lw[0] / 2, box.size_lw[1] / 2])

    tmin = np.full(dirs.shape[0], -np.inf)
    tmax = np.full(dirs.shape[0], np.inf)
    ok = np.ones(dirs.shape[0], dtype=bool)
    for ax in range(2):
        par = np.abs(d[:, ax]) < 1e-12
        ok &= ~(par & (np.abs(o[ax]) > half[ax]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[ax] - o[ax]) / d[:, ax]
            t2 = (half[ax] - o[ax]) / d[:, ax]
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        upd = ~par
        tmin[upd] = np.maximum(tmin[upd], lo[upd])
        tmax[upd] = np.minimum(tmax[upd], hi[upd])
    t0 = np.maximum(tmin, 0.0)
    hit = ok & (tmax >= t0) & (tmax > 0)
    return hit, t0, tmax


def render_lidar(scene: Scene, config: WorldConfig) -> LidarSweep:
    """Radial beam-cast sweep: interior chord returns per box plus clutter."""
    rng = np.random.default_rng([scene.seed, _LIDAR_SALT])
    n_rays = config.num_beams * config.rays_per_beam
    az = 2 * math.pi * np.arange(n_rays) / n_rays
    dirs = np.stack([np.cos(az), np.sin(az)], axis=1)
    beams = (np.arange(n_rays) % config.num_beams).astype(np.int32)
    max_range = config.extent_m * math.sqrt(2)
    step = 0.25

    pts, inten, beam_idx = [], [], []
    for box in scene.boxes:
        hit, t0, t1 = _ray_box_span(box, dirs)
        t1 = np.minimum(t1, max_range)
        base = _class_intensity(box.class_id, config.num_classes)
        for ray in np.nonzero(hit)[0]:
            ts = np.arange(t0[ray], t1[ray] + 1e-9, step)
            if ts.size == 0:
                ts = np.array([t0[ray]])
            xy = ts[:, None] * dirs[ray]
            keep = (np.abs(xy[:, 0]) <= scene.extent_m) & \
                   (np.abs(xy[:, 1]) <= scene.extent_m)
            xy = xy[keep]
            if xy.size == 0:
                continue
            pts.append(xy)
            inten.append(base + rng.normal(0.0, 0.02, size=xy.shape[0]))
            beam_idx.append(np.full(xy.shape[0], beams[ray], dtype=np.int32))

    if config.clutter_points > 0:
        cxy = rng.uniform(-scene.extent_m, scene.extent_m,
                          size=(config.clutter_points, 2))
        pts.append(cxy)
        inten.append(rng.uniform(0.02, 0.15, size=config.clutter_points))
        beam_idx.append(rng.integers(0, config.num_beams,
                                     size=config.clutter_points).astype(np.int32))

    if pts:
        xy = np.concatenate(pts).astype(np.float32)
        intensity = np.clip(np.concatenate(inten), 0.0, 1.0).astype(np.float32)
        beam = np.concatenate(beam_idx)
    else:
        xy = np.zeros((0, 2), dtype=np.float32)
        intensity = np.zeros(0, dtype=np.float32)
        beam = np.zeros(0, dtype=np.int32)
    return LidarSweep(xy=xy, intensity=intensity, beam=beam,
                      num_beams=config.num_beams)


def render_camera(scene: Scene, config: WorldConfig) -> CameraStream:
    """K polar (depth x azimuth) view maps with class-textured box blobs."""
    rng = np.random.default_rng([scene.seed, _CAMERA_SALT])
    k = config.num_views
    fov = _f32(math.radians(config.fov_deg))
    depth_max = _f32(config.extent_m * math.sqrt(2))
    yaws = (2 * math.pi * np.arange(k) / k).astype(np.float32)
    views = rng.uniform(0.0, 0.02,
                        size=(k, config.view_h, config.view_w)).astype(np.float32)

    rows = np.arange(config.view_h)[:, None]
    cols = np.arange(config.view_w)[None, :]
    for box in scene.boxes:
        cx, cy = box.center_xy
        r = math.hypot(cx, cy)
        ang = math.atan2(cy, cx)
        base = _class_intensity(box.class_id, config.num_classes)
        radius = max(box.size_lw) / 2
        for view in range(k):
            phi = (ang - yaws[view] + math.pi) % (2 * math.pi) - math.pi
            # depth jitter drawn per (box, view) regardless of visibility so
            # the stream stays deterministic under config edits
            jitter = float(rng.normal(0.0, 1.0)) * config.depth_sigma_m
            if abs(phi) > fov / 2:
                continue
            col_c = (phi / fov + 0.5) * config.view_w
            row_c = np.clip((r + jitter) / depth_max, 0.0, 0.999) * config.view_h
            sig_c = max(math.atan2(radius, max(r, 1e-6)) / fov * config.view_w, 1.0)
            sig_r = max(radius / depth_max * config.view_h, 1.0)
            blob = np.exp(-0.5 * (((rows - row_c) / sig_r) ** 2 +
                                  ((cols - col_c) / sig_c) ** 2))
            texture = 0.75 + 0.25 * np.cos(
                (box.class_id + 1) * math.pi * (cols - col_c) / (2 * sig_c))
            views[view] = np.maximum(views[view],
                                     (base * blob * texture).astype(np.float32))
    return CameraStream(views=views, yaws=yaws, fov_rad=fov,
                        depth_max_m=depth_max)


# ---------------------------------------------------------------------------
# BEV projection


def _lift_channels(count: np.ndarray, vmax: np.ndarray, bins: np.ndarray,
                   c: int) -> np.ndarray:
    """Fixed, parameter-free lift of per-cell statistics to C channels."""
    out = np.empty((c,) + count.shape, dtype=np.float32)
    out[0] = np.tanh(0.5 * count)
    out[1] = np.clip(vmax, 0.0, 1.0)
    out[2:] = np.tanh(0.5 * bins)
    return out


def _cell_indices(xy: np.ndarray, gc: GridConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    col = np.floor((xy[:, 0] + gc.extent_x) / gc.cell_size_m).astype(np.int64)
    row = np.floor((xy[:, 1] + gc.extent_y) / gc.cell_size_m).astype(np.int64)
    ok = (col >= 0) & (col < gc.w) & (row >= 0) & (row < gc.h)
    return row[ok], col[ok], ok


def _project_points(xy: np.ndarray, intensity: np.ndarray,
                    gc: GridConfig) -> np.ndarray:
    if gc.c < 3:
        raise ValueError(f"channel width {gc.c} too small for the lift")
    nbins = gc.c - 2
    count = np.zeros((gc.h, gc.w), dtype=np.float64)
    vmax = np.zeros((gc.h, gc.w), dtype=np.float64)
    bins = np.zeros((nbins, gc.h, gc.w), dtype=np.float64)
    row, col, ok = _cell_indices(xy, gc)
    val = intensity[ok].astype(np.float64)
    np.add.at(count, (row, col), 1.0)
    np.maximum.at(vmax, (row, col), val)
    b = np.clip((val * nbins).astype(np.int64), 0, nbins - 1)
    np.add.at(bins, (b, row, col), 1.0)
    return _lift_channels(count, vmax, bins, gc.c)


def lidar_to_bev(sweep: LidarSweep, gc: GridConfig) -> BevGrid:
    feats = _project_points(sweep.xy, sweep.intensity, gc)
    return BevGrid(Tensor(feats), Modality.LIDAR, gc.cell_size_m)


def camera_to_bev(stream: CameraStream, gc: GridConfig) -> BevGrid:
    """Splat each polar view pixel along its depth ray into BEV cells."""
    if gc.c < 3:
        raise ValueError(f"channel width {gc.c} too small for the lift")
    k, vh, vw = stream.views.shape
    rows = (np.arange(vh) + 0.5) / vh
    cols = (np.arange(vw) + 0.5) / vw
    r = rows[:, None] * stream.depth_max_m
    phi = (cols[None, :] - 0.5) * stream.fov_rad

    all_xy, all_val = [], []
    floor = 0.05  # background noise stays out of the grids
    for view in range(k):
        ang = stream.yaws[view] + phi
        x = (r * np.cos(ang)).ravel()
        y = (r * np.sin(ang)).ravel()
        v = stream.views[view].ravel()
        keep = v > floor
        all_xy.append(np.stack([x[keep], y[keep]], axis=1))
        all_val.append(v[keep])
    xy = np.concatenate(all_xy) if all_xy else np.zeros((0, 2))
    val = np.concatenate(all_val) if all_val else np.zeros(0)
    feats = _project_points(xy, val, gc)
    return BevGrid(Tensor(feats), Modality.CAMERA, gc.cell_size_m)


# ---------------------------------------------------------------------------
# equality helpers (bit-exact, used by corruption and round-trip checks)


def scenes_equal(a: Scene, b: Scene) -> bool:
    if a.seed != b.seed or a.extent_m != b.extent_m or len(a.boxes) != len(b.boxes):
        return False
    return all(x.center_xy == y.center_xy and x.size_lw == y.size_lw and
               x.yaw == y.yaw and x.class_id == y.class_id and
               x.velocity_xy == y.velocity_xy
               for x, y in zip(a.boxes, b.boxes))


def sweeps_equal(a: LidarSweep, b: LidarSweep) -> bool:
    return (a.num_beams == b.num_beams and np.array_equal(a.xy, b.xy) and
            np.array_equal(a.intensity, b.intensity) and
            np.array_equal(a.beam, b.beam))


def streams_equal(a: CameraStream, b: CameraStream) -> bool:
    return (a.fov_rad == b.fov_rad and a.depth_max_m == b.depth_max_m and
            np.array_equal(a.views, b.views) and np.array_equal(a.yaws, b.yaws))


def samples_equal(a: Sample, b: Sample) -> bool:
    return (scenes_equal(a.scene, b.scene) and sweeps_equal(a.sweep, b.sweep)
            and streams_equal(a.stream, b.stream))


# ---------------------------------------------------------------------------
# dataset persistence ("BFD1")

_MAGIC = b"BFD1"
_VERSION = 1


def generate_dataset(master_seed: int, num_samples: int,
                     config: WorldConfig) -> list[Sample]:
    samples = []
    for i in range(num_samples):
        seed = (master_seed * 1_000_003 + i) & 0x7FFF_FFFF_FFFF_FFFF
        scene = sample_scene(seed, config)
        samples.append(Sample(scene=scene,
                              sweep=render_lidar(scene, config),
                              stream=render_camera(scene, config)))
    return samples


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.blob):
            raise DatasetFormatError(
                f"{self.path}: truncated at offset {self.off}")
        vals = struct.unpack_from(fmt, self.blob, self.off)
        self.off += size
        return vals

    def take_bytes(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise DatasetFormatError(
                f"{self.path}: truncated at offset {self.off}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def take_array(self, dtype: str, count: int) -> np.ndarray:
        raw = self.take_bytes(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).copy()


def dataset_write(path, samples: list[Sample], config_hash: str = "") -> None:
    hb = config_hash.encode("utf-8")
    chunks = [
        _MAGIC,
        struct.pack("<I", _VERSION),
        struct.pack("<H", len(hb)), hb,
        struct.pack("<I", len(samples)),
    ]
    for s in samples:
        sc = s.scene
        chunks.append(struct.pack("<qfI", sc.seed, sc.extent_m, len(sc.boxes)))
        for b in sc.boxes:
            chunks.append(struct.pack(
                "<fffffIff", b.center_xy[0], b.center_xy[1],
                b.size_lw[0], b.size_lw[1], b.yaw, b.class_id,
                b.velocity_xy[0], b.velocity_xy[1]))
        sw = s.sweep
        chunks.append(struct.pack("<II", sw.num_beams, sw.num_points))
        chunks.append(np.ascontiguousarray(sw.xy, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(sw.intensity, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(sw.beam, dtype="<i4").tobytes())
        st = s.stream
        k, vh, vw = st.views.shape
        chunks.append(struct.pack("<IIIff", k, vh, vw, st.fov_rad,
                                  st.depth_max_m))
        chunks.append(np.ascontiguousarray(st.yaws, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(st.views, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def dataset_read(path) -> tuple[list[Sample], str]:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, path)
    if r.take_bytes(4) != _MAGIC:
        raise DatasetFormatError(f"{path}: bad magic")
    (version,) = r.take("<I")
    if version != _VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    (hlen,) = r.take("<H")
    config_hash = r.take_bytes(hlen).decode("utf-8")
    (count,) = r.take("<I")

    samples = []
    for _ in range(count):
        seed, extent, nboxes = r.take("<qfI")
        boxes = []
        for _ in range(nboxes):
            cx, cy, l, w, yaw, cls, vx, vy = r.take("<fffffIff")
            boxes.append(ObjectBox((cx, cy), (l, w), yaw, int(cls), (vx, vy)))
        scene = Scene(boxes=boxes, seed=seed, extent_m=extent)
        num_beams, npts = r.take("<II")
        xy = r.take_array("<f4", npts * 2).reshape(npts, 2)
        intensity = r.take_array("<f4", npts)
        beam = r.take_array("<i4", npts)
        sweep = LidarSweep(xy=xy, intensity=intensity, beam=beam,
                           num_beams=num_beams)
        k, vh, vw, fov, depth_max = r.take("<IIIff")
        yaws = r.take_array("<f4", k)
        views = r.take_array("<f4", k * vh * vw).reshape(k, vh, vw)
        stream = CameraStream(views=views, yaws=yaws, fov_rad=fov,
                              depth_max_m=depth_max)
        samples.append(Sample(scene=scene, sweep=sweep, stream=stream))
    if r.off != len(blob):
        raise DatasetFormatError(f"{path}: trailing bytes at offset {r.off}")
    return samples, config_hash
