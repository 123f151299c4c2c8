"""Synthetic paired scenes: RGB image, segmentation labels, dense depth.

Scenes hold 2-5 colored shapes (circle, rectangle, triangle) over a gray
background, all rendered under a per-scene global lighting factor. Class
identity is carried by channel ratios, which lighting cannot disturb. Depth
is carried by shading: a shape's brightness is its color times
lighting * (1 - 0.75 * depth). Because lighting varies scene to scene, raw
brightness is ambiguous; recovering depth requires reading the lighting level
off the background (whose base color is fixed) and normalizing the shape's
shading against it, a spatially relational computation rather than a pixel
lookup. Shapes are painted far to near; anti-aliased border pixels take the
ignore label 255. A fixed seed reproduces a scene bit for bit.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError

IGNORE_INDEX = 255
CLASS_NAMES = ("background", "circle", "rectangle", "triangle")
NUM_CLASSES = len(CLASS_NAMES)

# Dominant-channel brightness at full lighting and zero depth.
_BRIGHT = 0.9
# Shading law: shape brightness scales with lighting * (1 - _DEPTH_SLOPE * depth).
_DEPTH_SLOPE = 0.75
# Per-scene global lighting range; the background exposes the drawn value.
_LIGHT_LO, _LIGHT_HI = 0.6, 1.0
_BACKGROUND_DEPTH = 1.0
_BACKGROUND_COLOR = (0.2, 0.2, 0.225)
# Half-width (pixels) of the anti-aliased coverage ramp at shape borders.
_EDGE_SOFTNESS = 1.5
_COVER_LO, _COVER_HI = 0.05, 0.95

_SHAPE_KINDS = ("circle", "rectangle", "triangle")


@dataclass
class ShapeSpec:
    """One shape: kind, center, size (pixels), depth, colors, scene lighting."""

    kind: str
    cx: float
    cy: float
    size: float
    depth: float
    off_colors: tuple
    aspect: float = 1.0
    lighting: float = 1.0

    def __post_init__(self):
        if self.kind not in _SHAPE_KINDS:
            raise ConfigurationError(f"unknown shape kind {self.kind!r}")
        if not 0.0 < self.depth < 1.0:
            raise ConfigurationError("shape depth must lie strictly inside (0, 1)")
        if self.size <= 0:
            raise ConfigurationError("shape size must be positive")
        if not 0.0 < self.lighting <= 1.0:
            raise ConfigurationError("shape lighting must lie in (0, 1]")


@dataclass
class Scene:
    """image (3, S, S) float32 in [0, 1]; seg (S, S) uint8; depth (S, S) float32."""

    image: np.ndarray
    seg: np.ndarray
    depth: np.ndarray

    def validate(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError("image must be (3, H, W)")
        if self.seg.shape != self.image.shape[1:] or self.depth.shape != self.image.shape[1:]:
            raise DataError("seg and depth must match the image resolution")
        if not np.isfinite(self.image).all() or not np.isfinite(self.depth).all():
            raise DataError("image and depth must be finite")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise DataError("image values must lie in [0, 1]")
        if self.depth.min() < 0.0 or self.depth.max() > 1.0:
            raise DataError("depth values must lie in [0, 1]")
        labels = np.unique(self.seg)
        valid = set(range(NUM_CLASSES)) | {IGNORE_INDEX}
        if not set(labels.tolist()) <= valid:
            raise DataError(f"unexpected labels {sorted(set(labels.tolist()) - valid)}")
        return self


def _signed_distance(shape, size):
    """Positive inside the shape, negative outside, in pixel units."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape.kind == "circle":
        return shape.size - np.hypot(xs - shape.cx, ys - shape.cy)
    if shape.kind == "rectangle":
        half_w = shape.size
        half_h = shape.size * shape.aspect
        return np.minimum(half_w - np.abs(xs - shape.cx), half_h - np.abs(ys - shape.cy))
    # triangle: apex up, three inward half-plane distances
    s = shape.size
    verts = np.array([
        [shape.cx, shape.cy - s],
        [shape.cx - 0.95 * s, shape.cy + 0.75 * s],
        [shape.cx + 0.95 * s, shape.cy + 0.75 * s],
    ])
    dist = np.full((size, size), np.inf)
    for i in range(3):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % 3]
        # inward normal of edge a->b for this vertex order (y axis points down)
        nx, ny = by - ay, ax - bx
        norm = np.hypot(nx, ny)
        dist = np.minimum(dist, ((xs - ax) * nx + (ys - ay) * ny) / norm)
    return dist


def _shape_color(shape):
    ch = _SHAPE_KINDS.index(shape.kind)
    color = np.array(shape.off_colors[:ch] + (_BRIGHT,) + shape.off_colors[ch:], dtype=np.float64)
    return color * shape.lighting


def render_scene(shapes, size=64):
    """Paint shapes far to near with coverage blending at the borders."""
    img = np.empty((3, size, size), dtype=np.float64)
    for c in range(3):
        img[c] = _BACKGROUND_COLOR[c]
    seg = np.zeros((size, size), dtype=np.uint8)
    depth = np.full((size, size), _BACKGROUND_DEPTH, dtype=np.float64)

    for shape in sorted(shapes, key=lambda s: -s.depth):
        cover = np.clip(_signed_distance(shape, size) / (2.0 * _EDGE_SOFTNESS) + 0.5, 0.0, 1.0)
        touched = cover > 0.0
        color = _shape_color(shape)
        img[:, touched] = (1.0 - cover[touched]) * img[:, touched] + cover[touched] * color[:, None]
        depth[touched] = (1.0 - cover[touched]) * depth[touched] + cover[touched] * shape.depth
        solid = cover >= _COVER_HI
        edge = (cover > _COVER_LO) & ~solid
        seg[solid] = _SHAPE_KINDS.index(shape.kind) + 1
        seg[edge] = IGNORE_INDEX

    return Scene(
        image=np.clip(img, 0.0, 1.0).astype(np.float32),
        seg=seg,
        depth=np.clip(depth, 0.0, 1.0).astype(np.float32),
    ).validate()


def generate_scene(rng_seed, size=64, num_shapes=None):
    """Deterministic scene for one seed; num_shapes=0 forces an empty scene."""
    if size < 16:
        raise ConfigurationError("scene size must be >= 16")
    rng = np.random.default_rng(int(rng_seed))
    if num_shapes is None:
        n = int(rng.integers(2, 6))
    else:
        n = int(num_shapes)
        if n < 0:
            raise ConfigurationError("num_shapes must be >= 0")
    shapes = []
    margin = size * 0.25
    for _ in range(n):
        kind = _SHAPE_KINDS[int(rng.integers(0, 3))]
        depth = float(rng.uniform(0.1, 0.9))
        shapes.append(
            ShapeSpec(
                kind=kind,
                cx=float(rng.uniform(margin, size - margin)),
                cy=float(rng.uniform(margin, size - margin)),
                size=(_SIZE_NEAR - _SIZE_SLOPE * depth) * size,
                depth=depth,
                off_colors=(float(rng.uniform(0.1, 0.3)), float(rng.uniform(0.1, 0.3))),
                aspect=float(rng.uniform(0.8, 1.0)),
                lighting=float(rng.uniform(_LIGHT_LO, _LIGHT_HI)),
            )
        )
    return render_scene(shapes, size=size)


@dataclass
class SceneBundle:
    """Stacked scene arrays plus the seeds that produced them."""

    images: np.ndarray  # (N, 3, S, S) float32
    seg: np.ndarray     # (N, S, S) uint8
    depth: np.ndarray   # (N, S, S) float32
    seeds: tuple

    def __len__(self):
        return self.images.shape[0]


def build_bundle(seeds, size=64):
    scenes = [generate_scene(s, size=size) for s in seeds]
    if not scenes:
        raise ConfigurationError("cannot build an empty bundle")
    return SceneBundle(
        images=np.stack([s.image for s in scenes]),
        seg=np.stack([s.seg for s in scenes]),
        depth=np.stack([s.depth for s in scenes]),
        seeds=tuple(int(s) for s in seeds),
    )


def dataset_splits(n_train, n_val, n_test, base_seed=1000, size=64, n_extra=0):
    """Bundles over disjoint consecutive seed ranges.

    n_extra reserves a fourth disjoint range (returned as seeds only) for
    consumers that need data untouched by training and evaluation, e.g.
    detector fitting.
    """
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n <= 0:
            raise ConfigurationError(f"{name} must be positive")
    if n_extra < 0:
        raise ConfigurationError("n_extra must be >= 0")
    base = int(base_seed)
    train_seeds = range(base, base + n_train)
    val_seeds = range(base + n_train, base + n_train + n_val)
    test_seeds = range(base + n_train + n_val, base + n_train + n_val + n_test)
    extra_seeds = range(test_seeds.stop, test_seeds.stop + n_extra)
    assert set(train_seeds).isdisjoint(val_seeds) and set(val_seeds).isdisjoint(test_seeds)
    train = build_bundle(train_seeds, size=size)
    val = build_bundle(val_seeds, size=size)
    test = build_bundle(test_seeds, size=size)
    if n_extra:
        return train, val, test, tuple(extra_seeds)
    return train, val, test


_MAGIC = b"SCNB"
_VERSION = 1
_DTYPES = {"f4": np.float32, "u1": np.uint8}


def _write_array(fh, arr):
    code = {np.float32: "f4", np.uint8: "u1"}[arr.dtype.type]
    fh.write(struct.pack("<2sB", code.encode(), arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    raw = np.ascontiguousarray(arr).tobytes()
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError("truncated scene container")
    return buf


def _read_array(fh):
    code, ndim = struct.unpack("<2sB", _read_exact(fh, 3))
    code = code.decode()
    if code not in _DTYPES:
        raise DataError(f"unknown dtype code {code!r} in scene container")
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8))
    expected = int(np.prod(shape)) * np.dtype(_DTYPES[code]).itemsize
    if nbytes != expected:
        raise DataError("scene container payload size does not match its header")
    raw = _read_exact(fh, nbytes)
    return np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()


def save_scenes(path, scenes):
    """Write scenes to a self-describing binary container."""
    scenes = list(scenes)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BI", _VERSION, len(scenes)))
        for scene in scenes:
            scene.validate()
            _write_array(fh, scene.image)
            _write_array(fh, scene.seg)
            _write_array(fh, scene.depth)


def load_scenes(path):
    """Read a container written by save_scenes; validates every record."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC:
            raise DataError("not a scene container (bad magic)")
        version, count = struct.unpack("<BI", _read_exact(fh, 5))
        if version != _VERSION:
            raise DataError(f"unsupported scene container version {version}")
        scenes = []
        for _ in range(count):
            image = _read_array(fh)
            seg = _read_array(fh)
            depth = _read_array(fh)
            scenes.append(Scene(image=image, seg=seg, depth=depth).validate())
        if fh.read(1):
            raise DataError("trailing bytes after the last scene record")
    return scenes


def _load_external_item(image_path, seg_path, depth_path, size, label_map, depth_max):
    from PIL import Image

    img = Image.open(image_path).convert("RGB").resize((size, size), Image.BILINEAR)
    image = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0

    seg_img = Image.open(seg_path).resize((size, size), Image.NEAREST)
    seg_raw = np.asarray(seg_img)
    if seg_raw.ndim == 3:
        seg_raw = seg_raw[..., 0]
    seg = np.full(seg_raw.shape, IGNORE_INDEX, dtype=np.uint8)
    mapped = np.zeros(seg_raw.shape, dtype=bool)
    for src, dst in label_map.items():
        if not (0 <= dst < NUM_CLASSES or dst == IGNORE_INDEX):
            raise DataError(f"label_map target {dst} is out of range")
        hit = seg_raw == src
        seg[hit] = dst
        mapped |= hit
    leftover = np.unique(seg_raw[~mapped])
    if leftover.size:
        raise DataError(f"segmentation ids {leftover.tolist()} not covered by the label map")

    if str(depth_path).endswith(".npy"):
        depth_raw = np.load(depth_path).astype(np.float64)
        if depth_raw.shape != (size, size):
            from PIL import Image as _I
            depth_img = _I.fromarray(depth_raw.astype(np.float32), mode="F").resize(
                (size, size), _I.NEAREST
            )
            depth_raw = np.asarray(depth_img, dtype=np.float64)
    else:
        depth_img = Image.open(depth_path).resize((size, size), Image.NEAREST)
        depth_raw = np.asarray(depth_img, dtype=np.float64)
        if depth_raw.ndim == 3:
            depth_raw = depth_raw[..., 0]
    if (depth_raw < 0).any():
        raise DataError("negative depth values")
    depth = np.clip(depth_raw / depth_max, 0.0, 1.0).astype(np.float32)

    return Scene(image=image, seg=seg, depth=depth).validate()


def ingest_external(image_dir, seg_dir, depth_dir, manifest_path, *, size=64,
                    label_map=None, depth_max=None, max_failure_fraction=0.01):
    """Load externally supplied (image, seg, depth) triples.

    The manifest is line-oriented: each data line holds three whitespace
    separated paths relative to the three directories. Comment lines starting
    with '#' may carry directives such as '# depth_max = 80'. Items that fail
    validation are collected; the run aborts if more than max_failure_fraction
    of them fail.

    Returns (scenes, failures) where failures is a list of (line, reason).
    """
    import os

    if label_map is None:
        label_map = {i: i for i in range(NUM_CLASSES)}
    entries = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if "=" in body:
                    key, _, value = body.partition("=")
                    if key.strip() == "depth_max":
                        depth_max = float(value)
                continue
            entries.append(line)
    if not entries:
        return [], []
    if depth_max is None or depth_max <= 0:
        raise DataError("depth_max must be declared (manifest directive or argument)")

    scenes, failures = [], []
    for line in entries:
        parts = line.split()
        if len(parts) != 3:
            failures.append((line, "expected three paths per line"))
            continue
        paths = [os.path.join(d, p) for d, p in zip((image_dir, seg_dir, depth_dir), parts)]
        try:
            scenes.append(_load_external_item(*paths, size=size, label_map=label_map,
                                              depth_max=depth_max))
        except Exception as exc:  # malformed item: record and continue
            failures.append((line, str(exc)))
    if len(failures) > max_failure_fraction * len(entries):
        raise DataError(
            f"{len(failures)}/{len(entries)} manifest items failed validation; "
            f"first failure: {failures[0][1]}"
        )
    return scenes, failures
