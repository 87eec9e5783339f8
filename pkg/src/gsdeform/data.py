"""Datasets: D-NeRF style loading/writing, analytic toy scenes, image I/O."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataError, ParameterError
from .rasterizer import Camera

# OpenGL (x right, y up, z back) <-> OpenCV (x right, y down, z forward)
GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


@dataclass
class Frame:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    t: float
    camera: Camera
    split: str = "train"
    name: str = ""


@dataclass
class Dataset:
    frames: list[Frame]
    points: np.ndarray | None = None
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    root: Path | None = None

    @property
    def train(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "train"]

    @property
    def test(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "test"]

    @property
    def resolution(self) -> tuple[int, int]:
        cam = self.frames[0].camera
        return cam.height, cam.width


# -- images ----------------------------------------------------------------


def read_image(path, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Float RGB in [0, 1]; an alpha channel is composited over ``background``."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA"):
                im = im.convert("RGBA" if "A" in im.getbands() else "RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.shape[-1] == 4:
        alpha = arr[..., 3:4]
        arr = arr[..., :3] * alpha + np.asarray(background, dtype=np.float64) * (1.0 - alpha)
    return arr


def to_uint8(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image, alpha=None) -> None:
    rgb = to_uint8(image)
    if alpha is not None:
        rgb = np.concatenate([rgb, to_uint8(alpha)[..., None]], axis=-1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed settings keep the bytes deterministic
    Image.fromarray(rgb).save(path, format="PNG", optimize=False, compress_level=6)


def write_raw(path, image) -> None:
    """Float32 row-major RGB dump in ``.npy`` form."""
    np.save(path, np.ascontiguousarray(np.asarray(image, dtype=np.float32)))


# -- D-NeRF format ----------------------------------------------------------


def camera_from_transform(c2w_gl, camera_angle_x: float, width: int, height: int, **kw) -> Camera:
    c2w = np.asarray(c2w_gl, dtype=np.float64).reshape(4, 4) @ GL_TO_CV
    w2c = np.linalg.inv(c2w)
    focal = 0.5 * width / math.tan(0.5 * camera_angle_x)
    return Camera(focal, focal, width / 2.0, height / 2.0, w2c, width, height, **kw)


def transform_from_camera(cam: Camera) -> np.ndarray:
    return np.linalg.inv(cam.world_to_camera) @ GL_TO_CV


def _resolve_image(root: Path, file_path: str) -> Path:
    path = root / file_path
    if path.suffix.lower() != ".png":
        path = path.with_name(path.name + ".png")
    return path


def load_dnerf_dataset(root, background=(1.0, 1.0, 1.0), splits=("train", "test"), **camera_kw) -> Dataset:
    """Read ``transforms_{split}.json`` files, their PNGs and an optional ``points.ply``."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    records = []
    for split in splits:
        meta_path = root / f"transforms_{split}.json"
        if not meta_path.exists():
            if split == "train":
                raise DataError(f"missing {meta_path}")
            continue
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed JSON in {meta_path}: {exc}") from exc
        if "camera_angle_x" not in meta or "frames" not in meta:
            raise DataError(f"{meta_path} lacks camera_angle_x or frames")
        angle_x = float(meta["camera_angle_x"])
        for i, fr in enumerate(meta["frames"]):
            try:
                file_path = fr["file_path"]
                matrix = np.asarray(fr["transform_matrix"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{meta_path}: frame {i} is malformed ({exc})") from exc
            if matrix.shape != (4, 4):
                raise DataError(f"{meta_path}: frame {i} transform_matrix is not 4x4")
            t_raw = float(fr.get("time", 0.0))
            records.append((split, file_path, matrix, t_raw, angle_x, meta.get("camera_angle_y")))
    if not records:
        raise DataError(f"no frames found under {root}")

    times = np.array([r[3] for r in records])
    lo, hi = times.min(), times.max()
    span = hi - lo
    frames = []
    shape = None
    for split, file_path, matrix, t_raw, angle_x, angle_y in records:
        path = _resolve_image(root, file_path)
        if not path.exists():
            raise DataError(f"missing image {path}")
        image = read_image(path, background)
        h, w = image.shape[:2]
        if shape is None:
            shape = (h, w)
        elif shape != (h, w):
            raise DataError(f"{path} is {w}x{h}, expected {shape[1]}x{shape[0]}")
        if angle_y is not None:
            fy = 0.5 * h / math.tan(0.5 * float(angle_y))
            fx = 0.5 * w / math.tan(0.5 * angle_x)
            if abs(fx - fy) > 1e-3 * fx:
                raise DataError(f"non-square pixels: fx={fx:.4f}, fy={fy:.4f}")
        t = (t_raw - lo) / span if span > 0 else 0.0
        cam = camera_from_transform(matrix, angle_x, w, h, **camera_kw)
        frames.append(Frame(image, t, cam, split, Path(file_path).name))

    points = None
    ply = root / "points.ply"
    if ply.exists():
        from .gaussians import read_ply_vertices

        props = read_ply_vertices(ply)
        points = np.stack([props["x"], props["y"], props["z"]], axis=1)
    return Dataset(frames, points, tuple(background), root)


def write_dnerf_dataset(root, frames: Sequence[Frame], alphas: dict[str, np.ndarray] | None = None) -> None:
    """Write frames as a D-NeRF directory (PNG images plus transforms JSON)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    by_split: dict[str, list[Frame]] = {}
    for fr in frames:
        by_split.setdefault(fr.split, []).append(fr)
    for split, items in by_split.items():
        cam0 = items[0].camera
        angle_x = 2.0 * math.atan(0.5 * cam0.width / cam0.fx)
        entries = []
        for i, fr in enumerate(items):
            name = fr.name or f"r_{i:03d}"
            rel = f"./{split}/{name}"
            alpha = None if alphas is None else alphas.get(f"{split}/{name}")
            write_png(root / split / f"{name}.png", fr.image, alpha)
            entries.append(
                {
                    "file_path": rel,
                    "time": float(fr.t),
                    "transform_matrix": transform_from_camera(fr.camera).tolist(),
                }
            )
        doc = {"camera_angle_x": angle_x, "frames": entries}
        (root / f"transforms_{split}.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")


# -- analytic toy scenes ----------------------------------------------------


@dataclass
class Primitive:
    kind: str  # "sphere" or "box"
    color: tuple[float, float, float]
    size: float | tuple[float, float, float]  # radius, or box half extents
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)  # translation over t in [0, 1]
    orbit_radius: float = 0.0  # circular motion about +z, one revolution per unit t scaled by orbit_turns
    orbit_turns: float = 0.0
    orbit_phase: float = 0.0
    spin_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    spin_angle: float = 0.0  # total rotation (radians) over t in [0, 1]

    def center_at(self, t: float) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64) + t * np.asarray(self.velocity, dtype=np.float64)
        if self.orbit_radius:
            a = self.orbit_phase + 2.0 * math.pi * self.orbit_turns * t
            c = c + self.orbit_radius * np.array([math.cos(a), math.sin(a), 0.0])
        return c

    def rotation_at(self, t: float) -> np.ndarray:
        axis = np.asarray(self.spin_axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        angle = self.spin_angle * t
        K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


@dataclass
class ToySceneSpec:
    primitives: list[Primitive]
    n_frames: int = 20
    n_test: int = 5
    resolution: int = 64
    camera_distance: float = 4.0
    camera_fov_x: float = 0.7
    elevation_range: tuple[float, float] = (0.15, 0.9)
    orbit_turns: float = 1.0  # camera revolutions over t in [0, 1]
    supersample: int = 3
    seed: int = 0
    light_dir: tuple[float, float, float] = (0.4, -0.3, 0.85)
    tint_contrast: float = 0.25  # brightness swing of the sphere's octant pattern

    def __post_init__(self):
        if self.n_frames < 1 or self.resolution < 1:
            raise ParameterError("a toy scene needs at least one frame and one pixel")
        if not self.primitives:
            raise ParameterError("a toy scene needs at least one primitive")


PRESETS = {
    "sphere-translate": lambda seed: ToySceneSpec(
        [Primitive("sphere", (0.85, 0.3, 0.2), 0.45, center=(-0.5, 0.0, 0.0), velocity=(1.0, 0.0, 0.0))],
        seed=seed,
    ),
    "two-spheres-orbit": lambda seed: ToySceneSpec(
        [
            Primitive("sphere", (0.2, 0.5, 0.9), 0.35, orbit_radius=0.55, orbit_turns=0.5),
            Primitive("sphere", (0.9, 0.8, 0.2), 0.3, orbit_radius=0.55, orbit_turns=0.5, orbit_phase=math.pi),
        ],
        seed=seed,
    ),
    "box-rotate": lambda seed: ToySceneSpec(
        [Primitive("box", (0.3, 0.75, 0.35), (0.5, 0.35, 0.25), spin_axis=(0.0, 0.0, 1.0), spin_angle=math.pi / 2)],
        seed=seed,
    ),
}


def _orbit_camera(spec: ToySceneSpec, azimuth: float, elevation: float) -> Camera:
    d = spec.camera_distance
    eye = d * np.array(
        [math.cos(elevation) * math.cos(azimuth), math.cos(elevation) * math.sin(azimuth), math.sin(elevation)]
    )
    return Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), spec.camera_fov_x, spec.resolution, spec.resolution)


def _trace(spec: ToySceneSpec, cam: Camera, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Supersampled ray cast; returns straight RGB (H, W, 3) and coverage alpha."""
    ss = spec.supersample
    H, W = cam.height, cam.width
    offs = (np.arange(ss) + 0.5) / ss
    u = (np.arange(W)[:, None] + offs[None, :]).reshape(-1)
    v = (np.arange(H)[:, None] + offs[None, :]).reshape(-1)
    uu, vv = np.meshgrid(u, v)  # (H*ss, W*ss)
    dirs_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
    R = cam.rotation
    dirs = dirs_cam @ R  # world = R^T d
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = cam.center
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light /= np.linalg.norm(light)

    best = np.full(uu.shape, np.inf)
    rgb = np.zeros(uu.shape + (3,))
    for prim in spec.primitives:
        c = prim.center_at(t)
        Rp = prim.rotation_at(t)
        o = (origin - c) @ Rp  # into primitive frame
        d = dirs @ Rp
        if prim.kind == "sphere":
            r = float(prim.size)
            b = (d * o).sum(-1)
            disc = b * b - (o @ o - r * r)
            hit = disc >= 0
            dist = np.where(hit, -b - np.sqrt(np.maximum(disc, 0)), np.inf)
            hit &= dist > 0
            dist = np.where(hit, dist, np.inf)
            p_local = o + np.where(hit, dist, 0)[..., None] * d
            normal_local = p_local / r
            # octant tint gives the surface some texture
            tint = 1.0 - spec.tint_contrast + spec.tint_contrast * np.sign(normal_local[..., 0]) * np.sign(normal_local[..., 1])
        elif prim.kind == "box":
            half = np.asarray(prim.size, dtype=np.float64)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                t0 = (-half - o) * inv
                t1 = (half - o) * inv
            tmin = np.minimum(t0, t1).max(-1)
            tmax = np.maximum(t0, t1).min(-1)
            hit = (tmax >= tmin) & (tmin > 0)
            dist = np.where(hit, tmin, np.inf)
            p_local = o + np.where(hit, dist, 0)[..., None] * d
            face = np.abs(p_local / half)
            axis = face.argmax(-1)
            normal_local = np.zeros_like(p_local)
            np.put_along_axis(normal_local, axis[..., None], np.sign(np.take_along_axis(p_local, axis[..., None], -1)), -1)
            tint = np.where(axis == 2, 1.0, np.where(axis == 1, 0.8, 0.65))
        else:
            raise ParameterError(f"unknown primitive {prim.kind!r}")
        normal = normal_local @ Rp.T
        shade = 0.45 + 0.55 * np.clip(normal @ light, 0.0, 1.0)
        color = np.clip(np.asarray(prim.color)[None, None, :] * (shade * tint)[..., None], 0.0, 1.0)
        closer = hit & (dist < best)
        best = np.where(closer, dist, best)
        rgb = np.where(closer[..., None], color, rgb)

    covered = np.isfinite(best)
    summed = rgb.reshape(H, ss, W, ss, 3).sum(axis=(1, 3))
    count = covered.reshape(H, ss, W, ss).sum(axis=(1, 3)).astype(np.float64)
    alpha = count / (ss * ss)
    straight = np.where(count[..., None] > 0, summed / np.maximum(count, 1)[..., None], 0.0)
    return straight, alpha


def render_toy_frame(spec: ToySceneSpec, cam: Camera, t: float, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    rgb, alpha = _trace(spec, cam, t)
    return rgb * alpha[..., None] + np.asarray(background) * (1.0 - alpha[..., None])


def toy_camera(spec: ToySceneSpec, t: float, azimuth0: float, phase: float) -> Camera:
    """Camera of the monocular orbit at time ``t``.

    Azimuth advances ``orbit_turns`` revolutions over the sequence while the
    elevation swings once through ``elevation_range``.
    """
    lo, hi = spec.elevation_range
    az = azimuth0 + 2.0 * math.pi * spec.orbit_turns * t
    el = lo + (hi - lo) * (0.5 + 0.5 * math.sin(2.0 * math.pi * t + phase))
    return _orbit_camera(spec, az, el)


def generate_toy_scene(spec: ToySceneSpec, out_dir) -> Dataset:
    """Ray-trace the scene along a camera orbit and write a D-NeRF directory.

    Train frames take evenly spaced timestamps covering [0, 1]; test frames
    sit halfway between consecutive train timestamps, so every test time is
    held out.  The camera moves with time as in a monocular video; the seed
    picks the orbit's starting azimuth and elevation phase.
    """
    rng = np.random.default_rng(spec.seed)
    azimuth0, phase = rng.uniform(0.0, 2.0 * math.pi, size=2)
    n = spec.n_frames
    train_t = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    if n > 1 and spec.n_test:
        slots = np.linspace(0, n - 2, spec.n_test).round().astype(int)
        test_t = 0.5 * (train_t[slots] + train_t[slots + 1])
    else:
        test_t = np.zeros(0)
    frames, alphas = [], {}
    for split, times in (("train", train_t), ("test", test_t)):
        for i, t in enumerate(times):
            cam = toy_camera(spec, float(t), azimuth0, phase)
            rgb, alpha = _trace(spec, cam, float(t))
            name = f"r_{i:03d}"
            frames.append(Frame(rgb, float(t), cam, split, name))
            alphas[f"{split}/{name}"] = alpha
    write_dnerf_dataset(out_dir, frames, alphas)
    return load_dnerf_dataset(out_dir)


def dataset_digest(root) -> str:
    """SHA-256 over every file under ``root`` (sorted by relative path)."""
    import hashlib

    h = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()
