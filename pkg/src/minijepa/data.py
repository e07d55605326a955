"""Synthetic moving-shapes scenes with dense ground truth, plus file I/O.

Scenes contain rectangles, discs and triangles with per-object color,
velocity and depth layer; motion is linear with reflection off the canvas
edges. Every frame carries a class-id mask, an instance-id mask and a depth
field (constant within each object). The scene-level label is the class of
the largest object.

On-disk formats are deliberately raw: frames as planar 8-bit RGB, masks as
8-bit planes, depth as little-endian float32, each with a small magic+dims
header; rendered outputs use the portable pixel-map family. Writes go
through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import stream

RECT, DISC, TRI = "rect", "disc", "tri"
SHAPE_CLASS = {RECT: 1, DISC: 2, TRI: 3}
CLASS_NAMES = ("background", RECT, DISC, TRI)
NUM_CLASSES = len(CLASS_NAMES)

_BG_LEVEL = 24.0


@dataclass(frozen=True)
class SyntheticSceneSpec:
    canvas: int = 32
    num_objects: int = 3
    shapes: tuple[str, ...] = (RECT, DISC, TRI)
    frame_count: int = 1
    min_size: float = 5.0
    max_size: float = 11.0
    max_speed: float = 1.5
    noise: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.canvas < 8:
            raise ValueError("canvas too small")
        if self.max_size * 2 >= self.canvas:
            raise ValueError("canvas too small for the configured object sizes")
        for s in self.shapes:
            if s not in SHAPE_CLASS:
                raise ValueError(f"unknown shape {s!r}")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    half_w: float
    half_h: float
    cx: float
    cy: float
    vx: float
    vy: float
    layer: int
    color: tuple[float, float, float]

    @property
    def area(self) -> float:
        if self.shape == RECT:
            return 4.0 * self.half_w * self.half_h
        if self.shape == DISC:
            return np.pi * self.half_w * self.half_h
        return 2.0 * self.half_w * self.half_h  # triangle: base * height / 2

    @property
    def perimeter(self) -> float:
        if self.shape == RECT:
            return 4.0 * (self.half_w + self.half_h)
        if self.shape == DISC:
            return np.pi * (self.half_w + self.half_h)  # ellipse, approximate
        side = np.hypot(self.half_w, 2.0 * self.half_h)
        return 2.0 * self.half_w + 2.0 * side


def sample_scene(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list[SceneObject]:
    objs = []
    order = rng.permutation(spec.num_objects)
    for i in range(spec.num_objects):
        shape = spec.shapes[int(rng.integers(0, len(spec.shapes)))]
        half_w = rng.uniform(spec.min_size, spec.max_size) / 2.0
        half_h = rng.uniform(spec.min_size, spec.max_size) / 2.0
        if shape == DISC:
            half_h = half_w
        margin_x, margin_y = half_w + 1.0, half_h + 1.0
        objs.append(SceneObject(
            shape=shape, half_w=half_w, half_h=half_h,
            cx=rng.uniform(margin_x, spec.canvas - margin_x),
            cy=rng.uniform(margin_y, spec.canvas - margin_y),
            vx=rng.uniform(-spec.max_speed, spec.max_speed),
            vy=rng.uniform(-spec.max_speed, spec.max_speed),
            layer=int(order[i]),
            color=tuple(rng.uniform(70.0, 255.0, size=3)),
        ))
    return objs


def scene_label(objs: list[SceneObject]) -> int:
    largest = max(objs, key=lambda o: o.area)
    return SHAPE_CLASS[largest.shape]


def _advance(obj: SceneObject, canvas: int) -> SceneObject:
    cx, vx = obj.cx + obj.vx, obj.vx
    cy, vy = obj.cy + obj.vy, obj.vy
    lo_x, hi_x = obj.half_w + 1.0, canvas - obj.half_w - 1.0
    lo_y, hi_y = obj.half_h + 1.0, canvas - obj.half_h - 1.0
    if cx < lo_x:
        cx, vx = 2 * lo_x - cx, -vx
    elif cx > hi_x:
        cx, vx = 2 * hi_x - cx, -vx
    if cy < lo_y:
        cy, vy = 2 * lo_y - cy, -vy
    elif cy > hi_y:
        cy, vy = 2 * hi_y - cy, -vy
    return replace(obj, cx=cx, cy=cy, vx=vx, vy=vy)


def _coverage(obj: SceneObject, canvas: int) -> np.ndarray:
    y = np.arange(canvas)[:, None] + 0.5
    x = np.arange(canvas)[None, :] + 0.5
    dx, dy = x - obj.cx, y - obj.cy
    if obj.shape == RECT:
        return (np.abs(dx) <= obj.half_w) & (np.abs(dy) <= obj.half_h)
    if obj.shape == DISC:
        return (dx / obj.half_w) ** 2 + (dy / obj.half_h) ** 2 <= 1.0
    # upward triangle: apex at (cx, cy - half_h), base at cy + half_h
    inside_y = np.abs(dy) <= obj.half_h
    frac = (dy + obj.half_h) / (2.0 * obj.half_h)  # 0 at apex, 1 at base
    return inside_y & (np.abs(dx) <= obj.half_w * np.clip(frac, 0.0, 1.0))


@dataclass
class RenderedScene:
    frames: np.ndarray      # [T, H, W, 3] uint8
    class_mask: np.ndarray  # [T, H, W] uint8 (0 = background)
    inst_mask: np.ndarray   # [T, H, W] uint8 (0 = background, 1.. = object)
    depth: np.ndarray       # [T, H, W] float32, constant per instance
    label: int
    objects: list[SceneObject] = field(default_factory=list)


def render_scene(spec: SyntheticSceneSpec) -> RenderedScene:
    rng = stream(spec.seed, "scene")
    objs = sample_scene(spec, rng)
    label = scene_label(objs)
    c = spec.canvas
    frames = np.empty((spec.frame_count, c, c, 3), dtype=np.uint8)
    class_mask = np.zeros((spec.frame_count, c, c), dtype=np.uint8)
    inst_mask = np.zeros((spec.frame_count, c, c), dtype=np.uint8)
    depth = np.empty((spec.frame_count, c, c), dtype=np.float32)
    n_layers = len(objs)
    noise_rng = stream(spec.seed, "scene-noise")

    current = objs
    for t in range(spec.frame_count):
        img = np.full((c, c, 3), _BG_LEVEL, dtype=np.float64)
        cmask = np.zeros((c, c), dtype=np.uint8)
        imask = np.zeros((c, c), dtype=np.uint8)
        dfield = np.full((c, c), float(n_layers + 1), dtype=np.float32)
        # painter's order: far layers first, near layers overwrite
        for obj_idx, obj in sorted(enumerate(current), key=lambda p: -p[1].layer):
            cov = _coverage(obj, c)
            img[cov] = obj.color
            cmask[cov] = SHAPE_CLASS[obj.shape]
            imask[cov] = obj_idx + 1
            dfield[cov] = float(obj.layer + 1)
        if spec.noise > 0:
            img += noise_rng.normal(0.0, spec.noise, size=img.shape)
        frames[t] = np.clip(img, 0, 255).astype(np.uint8)
        class_mask[t] = cmask
        inst_mask[t] = imask
        depth[t] = dfield
        current = [_advance(o, c) for o in current]
    return RenderedScene(frames, class_mask, inst_mask, depth, label, objs)


# ----------------------------------------------------------------------
# raw file formats

_MAGICS = {"frames": b"MJFR", "mask": b"MJM8", "f32": b"MJF4"}


class FormatError(ValueError):
    pass


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_frames(path, frames: np.ndarray) -> None:
    """Planar 8-bit RGB: header then, per frame, the R, G, B planes."""
    frames = np.asarray(frames, dtype=np.uint8)
    t, h, w, c = frames.shape
    header = _MAGICS["frames"] + struct.pack("<4I", t, h, w, c)
    planar = frames.transpose(0, 3, 1, 2)  # [T, C, H, W]
    _atomic_write(Path(path), header + planar.tobytes())


def read_frames(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGICS["frames"]:
        raise FormatError(f"{path}: bad magic for a frames file")
    t, h, w, c = struct.unpack("<4I", blob[4:20])
    data = np.frombuffer(blob[20:], dtype=np.uint8)
    if data.size != t * h * w * c:
        raise FormatError(f"{path}: truncated frames payload")
    return data.reshape(t, c, h, w).transpose(0, 2, 3, 1).copy()


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=np.uint8)
    t, h, w = mask.shape
    _atomic_write(Path(path), _MAGICS["mask"] + struct.pack("<3I", t, h, w) + mask.tobytes())


def read_mask(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGICS["mask"]:
        raise FormatError(f"{path}: bad magic for a mask file")
    t, h, w = struct.unpack("<3I", blob[4:16])
    data = np.frombuffer(blob[16:], dtype=np.uint8)
    if data.size != t * h * w:
        raise FormatError(f"{path}: truncated mask payload")
    return data.reshape(t, h, w).copy()


def write_f32(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    t, h, w = arr.shape
    _atomic_write(Path(path), _MAGICS["f32"] + struct.pack("<3I", t, h, w) + arr.tobytes())


def read_f32(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGICS["f32"]:
        raise FormatError(f"{path}: bad magic for an f32 file")
    t, h, w = struct.unpack("<3I", blob[4:16])
    data = np.frombuffer(blob[16:], dtype="<f4")
    if data.size != t * h * w:
        raise FormatError(f"{path}: truncated f32 payload")
    return data.reshape(t, h, w).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    _atomic_write(Path(path), b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    _atomic_write(Path(path), b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


# ----------------------------------------------------------------------
# datasets on disk

@dataclass(frozen=True)
class DatasetSpec:
    scene: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    n_train: int = 128
    n_val: int = 64
    seed: int = 0


def _sample_dirname(i: int) -> str:
    return f"{i:05d}"


def generate_dataset(spec: DatasetSpec, out_dir) -> Path:
    """Write train/ and val/ scene directories; deterministic per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {"train": spec.n_train, "val": spec.n_val}
    for split_idx, (split, count) in enumerate(counts.items()):
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        for i in range(count):
            # seed partition: split index and sample index key the stream
            sample_seed = int(stream(spec.seed, "dataset", split_idx, i).integers(0, 2**63 - 1))
            scene = render_scene(replace(spec.scene, seed=sample_seed))
            d = split_dir / _sample_dirname(i)
            d.mkdir(exist_ok=True)
            write_frames(d / "frames.bin", scene.frames)
            write_mask(d / "class.bin", scene.class_mask)
            write_mask(d / "inst.bin", scene.inst_mask)
            write_f32(d / "depth.bin", scene.depth)
            (d / "label.txt").write_text(f"{scene.label}\n", encoding="utf-8")
    meta = {
        "seed": spec.seed,
        "n_train": spec.n_train,
        "n_val": spec.n_val,
        "canvas": spec.scene.canvas,
        "frame_count": spec.scene.frame_count,
        "num_objects": spec.scene.num_objects,
        "noise": spec.scene.noise,
        "classes": list(CLASS_NAMES),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return out


@dataclass
class SceneSample:
    frames: np.ndarray
    class_mask: np.ndarray
    inst_mask: np.ndarray
    depth: np.ndarray
    label: int


def load_dataset(root, split: str) -> list[SceneSample]:
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"no such dataset split: {split_dir}")
    samples = []
    for d in sorted(split_dir.iterdir()):
        if not d.is_dir():
            continue
        samples.append(SceneSample(
            frames=read_frames(d / "frames.bin"),
            class_mask=read_mask(d / "class.bin"),
            inst_mask=read_mask(d / "inst.bin"),
            depth=read_f32(d / "depth.bin"),
            label=int((d / "label.txt").read_text().strip()),
        ))
    return samples


# ----------------------------------------------------------------------
# streaming batches for pretraining

def training_batch(seed: int, step: int, image_count: int, video_count: int,
                   image_res: int, video_frames: int, video_res: int,
                   num_objects: int = 3, noise: float = 8.0,
                   max_speed: float = 1.5) -> list[tuple[str, np.ndarray]]:
    """Deterministic (modality, array) samples for one step, images first."""
    batch: list[tuple[str, np.ndarray]] = []
    for i in range(image_count):
        s = int(stream(seed, "data-image", step, i).integers(0, 2**63 - 1))
        scene = render_scene(SyntheticSceneSpec(
            canvas=image_res, num_objects=num_objects, frame_count=1,
            noise=noise, max_speed=max_speed, seed=s))
        batch.append(("image", scene.frames[0]))
    for i in range(video_count):
        s = int(stream(seed, "data-video", step, i).integers(0, 2**63 - 1))
        scene = render_scene(SyntheticSceneSpec(
            canvas=video_res, num_objects=num_objects, frame_count=video_frames,
            noise=noise, max_speed=max_speed, seed=s))
        batch.append(("video", scene.frames))
    return batch
