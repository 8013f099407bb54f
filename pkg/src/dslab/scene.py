"""
Depth scenes: data model, seeded synthetic generator, region statistics, disk I/O.

Depth is kept in meters. ``DepthImage.normalized()`` gives the [0, 1] view the
encoder consumes; region statistics always use raw meters.

On disk a scene is two files: ``<scene_id>.pgm`` (binary 16-bit PGM, value =
round(depth / max_range * 65535), big-endian) and ``<scene_id>.json`` holding
the annotations (schema ``dslab.scene/1``, masks run-length encoded over the
full-image raster as ``[start, length]`` runs).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError, GenerationError
from .io import atomic_write_bytes, atomic_write_text, read_json, write_json

SCHEMA = "dslab.scene/1"
PGM_MAXVAL = 65535

DEFAULT_SCENE_LABELS = (
    "bedroom", "kitchen", "bathroom", "office",
    "classroom", "corridor", "library", "garage",
)
DEFAULT_OBJECT_LABELS = (
    "bed", "chair", "table", "lamp", "sofa", "desk",
    "shelf", "sink", "toilet", "cabinet", "monitor", "door",
)


@dataclass(frozen=True)
class SceneGenConfig:
    width: int = 32
    height: int = 32
    max_range: float = 10.0
    scene_labels: tuple[str, ...] = DEFAULT_SCENE_LABELS
    object_labels: tuple[str, ...] = DEFAULT_OBJECT_LABELS
    min_objects: int = 2
    max_objects: int = 5
    min_depth: float = 0.8
    near_wall: float = 3.0
    far_wall: float = 8.5
    preferred_fraction: float = 0.75
    max_retries: int = 200

    def validate(self) -> None:
        if len(self.scene_labels) < 3:
            raise ConfigurationError("scene vocabulary needs at least 3 labels")
        if len(self.object_labels) < 8:
            raise ConfigurationError("object vocabulary needs at least 8 labels")
        if len(set(self.scene_labels)) != len(self.scene_labels) or len(set(self.object_labels)) != len(self.object_labels):
            raise ConfigurationError("vocabularies must not repeat labels")
        if self.width < 4 or self.height < 4:
            raise ConfigurationError("image must be at least 4x4")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigurationError("objects-per-scene range must satisfy 0 <= min <= max")
        if not 0 < self.min_depth < self.near_wall < self.far_wall <= self.max_range:
            raise ConfigurationError("depth range must satisfy 0 < min_depth < near_wall < far_wall <= max_range")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGenConfig":
        d = dict(d)
        for key in ("scene_labels", "object_labels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass(frozen=True, eq=False)
class DepthImage:
    width: int
    height: int
    depth: np.ndarray  # [height, width], meters
    max_range: float

    def __post_init__(self):
        arr = np.array(self.depth, dtype=np.float64).reshape(self.height, self.width)
        arr.setflags(write=False)
        object.__setattr__(self, "depth", arr)

    def normalized(self) -> np.ndarray:
        return self.depth / self.max_range

    def validate(self) -> None:
        if self.depth.size != self.width * self.height:
            raise ContractError("depth length != width * height")
        if not np.all(np.isfinite(self.depth)):
            raise ContractError("depth contains non-finite values")
        if self.depth.min() < 0 or self.depth.max() > self.max_range:
            raise ContractError(f"depth outside [0, {self.max_range}]")


@dataclass(frozen=True, eq=False)
class ObjectInstance:
    label: str
    bbox: tuple[int, int, int, int]  # x, y, w, h
    mask: np.ndarray  # sorted flat pixel indices (y * width + x)

    def __post_init__(self):
        m = np.unique(np.asarray(self.mask, dtype=np.int64))
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))

    def mask_matrix(self, width: int, height: int) -> np.ndarray:
        out = np.zeros(width * height, dtype=np.float64)
        out[self.mask] = 1.0
        return out.reshape(height, width)

    def validate(self, width: int, height: int) -> None:
        x, y, w, h = self.bbox
        if w < 1 or h < 1 or x < 0 or y < 0 or x + w > width or y + h > height:
            raise ContractError(f"bbox {self.bbox} outside {width}x{height} image")
        if self.mask.size == 0:
            raise ContractError(f"object {self.label!r} has an empty mask")
        px, py = self.mask % width, self.mask // width
        if px.min() < x or px.max() >= x + w or py.min() < y or py.max() >= y + h or self.mask.max() >= width * height:
            raise ContractError(f"mask of {self.label!r} leaves its bbox")

    def same_as(self, other: "ObjectInstance") -> bool:
        return self.label == other.label and self.bbox == other.bbox and np.array_equal(self.mask, other.mask)


@dataclass(frozen=True, eq=False)
class SceneRecord:
    scene_id: str
    scene_label: str
    image: DepthImage
    objects: tuple[ObjectInstance, ...]
    captions: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "captions", tuple(self.captions))

    def validate(self, scene_labels: Sequence[str] | None = None) -> None:
        self.image.validate()
        for obj in self.objects:
            obj.validate(self.image.width, self.image.height)
        if not self.captions:
            raise ContractError(f"{self.scene_id}: at least one caption required")
        if scene_labels is not None and self.scene_label not in scene_labels:
            raise ContractError(f"{self.scene_id}: scene label {self.scene_label!r} not in vocabulary")

    def annotations(self) -> dict:
        return {
            "schema": SCHEMA,
            "scene_id": self.scene_id,
            "scene_label": self.scene_label,
            "width": self.image.width,
            "height": self.image.height,
            "max_range": self.image.max_range,
            "objects": [
                {"index": i, "label": o.label, "bbox": list(o.bbox), "mask_rle": rle_encode(o.mask)}
                for i, o in enumerate(self.objects)
            ],
            "captions": list(self.captions),
        }

    def to_bytes(self) -> bytes:
        """Canonical serialisation used for determinism checks."""
        head = json.dumps(self.annotations(), sort_keys=True).encode("utf-8")
        return head + b"\0" + self.image.depth.tobytes()


# -- region statistics --------------------------------------------------------

def region_mean_depth(img: DepthImage, obj: ObjectInstance) -> float:
    """Mean depth in meters over the object's mask pixels."""
    if obj.mask.size == 0:
        raise ContractError(f"region_mean_depth: empty mask for {obj.label!r}")
    flat = img.depth.reshape(-1)
    # fsum is exactly rounded, so the result does not depend on pixel order
    return math.fsum(flat[obj.mask].tolist()) / obj.mask.size


# -- generator ----------------------------------------------------------------

def preferred_objects(config: SceneGenConfig, scene_index: int) -> list[str]:
    n = len(config.object_labels)
    return [config.object_labels[(3 * scene_index + j) % n] for j in range(4)]


def _label_depth_factor(config: SceneGenConfig, label: str) -> float:
    # each object label gets a typical relative depth in [0.15, 0.85]
    i = config.object_labels.index(label)
    n = len(config.object_labels)
    return 0.15 + 0.7 * ((7 * i) % n) / max(n - 1, 1)


def _background(config: SceneGenConfig, class_index: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    n = len(config.scene_labels)
    base = config.near_wall + (config.far_wall - config.near_wall) * class_index / max(n - 1, 1)
    base += rng.uniform(-0.2, 0.2)
    angle = 2 * np.pi * ((3 * class_index) % n) / n + rng.uniform(-0.25, 0.25)
    slope = 1.6 + rng.uniform(-0.3, 0.3)
    ys, xs = np.mgrid[0:config.height, 0:config.width]
    u = (xs + 0.5) / config.width - 0.5
    v = (ys + 0.5) / config.height - 0.5
    field_ = base + slope * (u * np.cos(angle) + v * np.sin(angle))
    return np.clip(field_, 0.0, config.max_range), base


def _shape_pixels(config: SceneGenConfig, x: int, y: int, w: int, h: int, ellipse: bool) -> np.ndarray:
    ys, xs = np.mgrid[y:y + h, x:x + w]
    if ellipse:
        cx, cy = x + w / 2.0, y + h / 2.0
        inside = (((xs + 0.5 - cx) / (w / 2.0)) ** 2 + ((ys + 0.5 - cy) / (h / 2.0)) ** 2) <= 1.0
        ys, xs = ys[inside], xs[inside]
    return (ys * config.width + xs).reshape(-1)


def _compose(config: SceneGenConfig, background: np.ndarray, shapes: list[tuple[np.ndarray, np.ndarray]]):
    """z-buffer the object surfaces over the background; returns depth and visible masks."""
    depth = background.reshape(-1).copy()
    owner = np.full(depth.size, -1, dtype=np.int64)
    for k, (pix, surf) in enumerate(shapes):
        closer = surf < depth[pix]
        depth[pix[closer]] = surf[closer]
        owner[pix[closer]] = k
    masks = [np.flatnonzero(owner == k) for k in range(len(shapes))]
    return depth.reshape(background.shape), masks


def generate_scene(seed: int, config: SceneGenConfig | None = None) -> SceneRecord:
    """Deterministic synthetic depth scene for ``seed``."""
    config = config or SceneGenConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    class_index = int(rng.integers(len(config.scene_labels)))
    scene_label = config.scene_labels[class_index]
    background, base = _background(config, class_index, rng)
    k = int(rng.integers(config.min_objects, config.max_objects + 1))
    preferred = preferred_objects(config, class_index)

    placed: list[dict] = []
    shapes: list[tuple[np.ndarray, np.ndarray]] = []
    masks: list[np.ndarray] = []
    depth = background
    for _ in range(k):
        for _attempt in range(config.max_retries):
            if rng.random() < config.preferred_fraction:
                label = preferred[int(rng.integers(len(preferred)))]
            else:
                label = config.object_labels[int(rng.integers(len(config.object_labels)))]
            far = base - 0.8
            d = config.min_depth + _label_depth_factor(config, label) * (far - config.min_depth)
            d = float(np.clip(d + rng.normal(0.0, 0.35), config.min_depth, far))
            if any(abs(d - p["depth"]) < 0.15 for p in placed):
                continue
            scale = float(np.clip(2.5 / d, 0.6, 1.5))
            w = int(np.clip(round(rng.uniform(5, 11) * scale), 3, config.width))
            h = int(np.clip(round(rng.uniform(5, 11) * scale), 3, config.height))
            # nearer objects sit lower in the frame
            rel = (d - config.min_depth) / max(far - config.min_depth, 1e-9)
            yc = (1.0 - rel) * (config.height - h) + rng.normal(0.0, 2.0)
            y = int(np.clip(round(yc), 0, config.height - h))
            x = int(rng.integers(0, config.width - w + 1))
            tilt = float(rng.uniform(-0.3, 0.3))
            if d + abs(tilt) + 0.2 >= background[y:y + h, x:x + w].min():
                continue
            pix = _shape_pixels(config, x, y, w, h, ellipse=bool(rng.random() < 0.5))
            px = pix % config.width
            surf = d + tilt * ((px + 0.5 - (x + w / 2.0)) / w)
            trial_depth, trial_masks = _compose(config, background, shapes + [(pix, surf)])
            areas = [s[0].size for s in shapes] + [pix.size]
            if any(m.size < 4 or m.size < 0.4 * a for m, a in zip(trial_masks, areas)):
                continue
            placed.append({"label": label, "bbox": (x, y, w, h), "depth": d})
            shapes.append((pix, surf))
            depth, masks = trial_depth, trial_masks
            break
        else:
            raise GenerationError(f"seed {seed}: could not place object {len(placed) + 1} of {k}")

    objects = tuple(ObjectInstance(p["label"], p["bbox"], m) for p, m in zip(placed, masks))
    image = DepthImage(config.width, config.height, np.clip(depth, 0.0, config.max_range), config.max_range)
    captions = synth_captions(scene_label, objects, image, rng)
    return SceneRecord(f"scene-{seed:06d}", scene_label, image, objects, captions)


NEAR_THRESHOLD = 3.0
CAPTION_TEMPLATES = (
    "an empty {scene}",
    "a {scene} containing a {label}",
    "a {scene} containing a {a} near a {b}",
    "a {label} close to the camera",
    "a {label} far from the camera",
)


def synth_captions(scene_label: str, objects: Sequence[ObjectInstance], image: DepthImage,
                   rng: np.random.Generator) -> tuple[str, ...]:
    """Fixed grammar: one scene caption plus one caption per object."""
    if not objects:
        return (CAPTION_TEMPLATES[0].format(scene=scene_label),)
    if len(objects) == 1:
        caps = [CAPTION_TEMPLATES[1].format(scene=scene_label, label=objects[0].label)]
    else:
        i, j = rng.choice(len(objects), size=2, replace=False)
        caps = [CAPTION_TEMPLATES[2].format(scene=scene_label, a=objects[i].label, b=objects[j].label)]
    for obj in objects:
        near = region_mean_depth(image, obj) < NEAR_THRESHOLD
        caps.append(CAPTION_TEMPLATES[3 if near else 4].format(label=obj.label))
    return tuple(caps)


def generate_scenes(seeds: Sequence[int], config: SceneGenConfig | None = None) -> list[SceneRecord]:
    return [generate_scene(s, config) for s in seeds]


# -- masks on disk ----------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> list[list[int]]:
    runs: list[list[int]] = []
    for p in np.asarray(mask, dtype=np.int64).tolist():
        if runs and runs[-1][0] + runs[-1][1] == p:
            runs[-1][1] += 1
        else:
            runs.append([p, 1])
    return runs


def rle_decode(runs) -> np.ndarray:
    if not runs:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.arange(s, s + n, dtype=np.int64) for s, n in runs])


# -- PGM ---------------------------------------------------------------------------

def encode_pgm(img: DepthImage) -> bytes:
    q = np.rint(img.depth / img.max_range * PGM_MAXVAL).astype(">u2")
    header = f"P5\n{img.width} {img.height}\n{PGM_MAXVAL}\n".encode("ascii")
    return header + q.tobytes()


def decode_pgm(buf: bytes, path: str | Path = "<bytes>") -> tuple[int, int, np.ndarray]:
    """Parse a 16-bit P5 image; returns (width, height, raw uint16 samples)."""
    if buf[:2] != b"P5":
        raise FormatError(path, 0, "not a binary PGM (expected P5 magic)")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(path, pos, "malformed PGM header")
        fields.append((int(buf[start:pos]), start))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(path, pos, "malformed PGM header")
    pos += 1
    (width, _), (height, _), (maxval, mpos) = fields
    if maxval != PGM_MAXVAL:
        raise FormatError(path, mpos, f"maxval {maxval} != {PGM_MAXVAL}")
    need = 2 * width * height
    if len(buf) - pos < need:
        raise FormatError(path, len(buf), f"truncated PGM: need {need} sample bytes, have {len(buf) - pos}")
    samples = np.frombuffer(buf, dtype=">u2", count=width * height, offset=pos).reshape(height, width)
    return width, height, samples


# -- scene files ----------------------------------------------------------------

def write_scene(rec: SceneRecord, directory: str | Path) -> None:
    directory = Path(directory)
    atomic_write_bytes(directory / f"{rec.scene_id}.pgm", encode_pgm(rec.image))
    atomic_write_text(directory / f"{rec.scene_id}.json", json.dumps(rec.annotations(), indent=1) + "\n")


def read_scene(directory: str | Path, scene_id: str) -> SceneRecord:
    """Load one scene. Raises FormatError without returning anything partial."""
    directory = Path(directory)
    pgm_path = directory / f"{scene_id}.pgm"
    json_path = directory / f"{scene_id}.json"
    width, height, samples = decode_pgm(pgm_path.read_bytes(), pgm_path)
    raw = json_path.read_bytes()
    try:
        ann = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(json_path, exc.pos, f"invalid JSON: {exc.msg}") from exc
    except UnicodeDecodeError as exc:
        raise FormatError(json_path, exc.start, "sidecar is not UTF-8") from exc
    try:
        if ann.get("schema") != SCHEMA:
            raise FormatError(json_path, 0, f"unknown schema {ann.get('schema')!r}")
        if (ann["width"], ann["height"]) != (width, height):
            raise FormatError(json_path, 0, "sidecar size disagrees with PGM")
        max_range = float(ann["max_range"])
        depth = samples.astype(np.float64) / PGM_MAXVAL * max_range
        image = DepthImage(width, height, depth, max_range)
        objects = []
        for o in ann["objects"]:
            x, y, w, h = o["bbox"]
            if "mask_rle" in o:
                mask = rle_decode(o["mask_rle"])
            else:
                # ingestion fallback: whole bbox rectangle
                ys, xs = np.mgrid[y:y + h, x:x + w]
                mask = (ys * width + xs).reshape(-1)
            objects.append(ObjectInstance(o["label"], (x, y, w, h), mask))
        rec = SceneRecord(ann["scene_id"], ann["scene_label"], image, tuple(objects), tuple(ann["captions"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(json_path, 0, f"bad annotation field: {exc}") from exc
    try:
        rec.validate()
    except ContractError as exc:
        raise FormatError(json_path, 0, str(exc)) from exc
    return rec


def write_scene_set(recs: Sequence[SceneRecord], directory: str | Path) -> None:
    directory = Path(directory)
    for rec in recs:
        write_scene(rec, directory)
    write_json(directory / "index.json", {"schema": SCHEMA, "scene_ids": [r.scene_id for r in recs]})


def read_scene_set(directory: str | Path) -> list[SceneRecord]:
    directory = Path(directory)
    index = read_json(directory / "index.json")
    return [read_scene(directory, sid) for sid in index["scene_ids"]]
