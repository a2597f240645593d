"""Synthetic line-drawing benchmark and dataset manifests.

Each synthetic ID is a random 3-D wireframe assembly (boxes, prisms,
cylinders).  Views are orthographic projections from different camera
angles, the way patent figures show one object from several sides;
views are never produced by rotating the raster.  Strokes are drawn at
a constant pixel width regardless of content scale, since fixed line
width is the property the augmentation policy is built around.

Manifests are JSON-lines files, one object per image:
``{"image_path", "patent_id", "view_index", "split"}`` with paths
relative to the manifest's directory.  Patent IDs never straddle the
train/val split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

BACKGROUND = 255
INK = 0

__all__ = [
    "DrawingImage",
    "ManifestEntry",
    "DatasetManifest",
    "ManifestError",
    "generate_synthetic",
    "load_manifest",
    "save_manifest",
    "split_by_id",
    "load_image",
    "read_drawing",
    "validate_drawing",
]


class ManifestError(ValueError):
    """Manifest file is malformed or violates a dataset invariant."""


@dataclass
class DrawingImage:
    """Single-channel raster (0 = ink, 255 = background) with provenance."""

    pixels: np.ndarray
    patent_id: str = ""
    view_index: int = 0

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def validate_drawing(img: DrawingImage):
    """Check raster shape/dtype and the sparse-ink-on-white invariant."""
    if img.pixels.ndim != 2 or img.pixels.dtype != np.uint8:
        raise ValueError("drawing pixels must be a 2-D uint8 array")
    if (img.pixels > 200).mean() < 0.5:
        raise ValueError(
            f"drawing {img.patent_id!r} view {img.view_index} is not "
            "background-majority"
        )


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    patent_id: str
    view_index: int
    split: str


@dataclass
class DatasetManifest:
    root_dir: Path
    entries: list

    def split_entries(self, split: Optional[str] = None) -> list:
        if split is None:
            return list(self.entries)
        return [e for e in self.entries if e.split == split]

    def ids(self, split: Optional[str] = None) -> list:
        return sorted({e.patent_id for e in self.split_entries(split)})


# ---------------------------------------------------------------------------
# wireframe geometry: each primitive is a list of 3-D segments (p0, p1)


def _box_segments() -> np.ndarray:
    c = np.array(
        [[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)]
    )
    idx = [
        (0, 1), (2, 3), (4, 5), (6, 7),
        (0, 2), (1, 3), (4, 6), (5, 7),
        (0, 4), (1, 5), (2, 6), (3, 7),
    ]
    return np.array([[c[i], c[j]] for i, j in idx])


def _prism_segments() -> np.ndarray:
    tri = np.array(
        [
            [0.55 * math.cos(2 * math.pi * k / 3), 0.55 * math.sin(2 * math.pi * k / 3)]
            for k in range(3)
        ]
    )
    segs = []
    for z in (-0.5, 0.5):
        for k in range(3):
            a, b = tri[k], tri[(k + 1) % 3]
            segs.append([[a[0], a[1], z], [b[0], b[1], z]])
    for k in range(3):
        segs.append([[tri[k][0], tri[k][1], -0.5], [tri[k][0], tri[k][1], 0.5]])
    return np.array(segs)


def _cylinder_segments(n: int = 8) -> np.ndarray:
    ring = np.array(
        [
            [0.5 * math.cos(2 * math.pi * k / n), 0.5 * math.sin(2 * math.pi * k / n)]
            for k in range(n)
        ]
    )
    segs = []
    for z in (-0.5, 0.5):
        for k in range(n):
            a, b = ring[k], ring[(k + 1) % n]
            segs.append([[a[0], a[1], z], [b[0], b[1], z]])
    for k in range(0, n, n // 4):
        segs.append([[ring[k][0], ring[k][1], -0.5], [ring[k][0], ring[k][1], 0.5]])
    return np.array(segs)


_PRIMITIVES = (_box_segments, _prism_segments, _cylinder_segments)


def _make_object(rng: np.random.Generator) -> np.ndarray:
    """Assemble 2-3 primitives with random yaw/scale/offset into one part."""
    n_parts = int(rng.integers(2, 4))
    pieces = []
    for _ in range(n_parts):
        base = _PRIMITIVES[int(rng.integers(len(_PRIMITIVES)))]()
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        rot = np.array(
            [
                [math.cos(yaw), -math.sin(yaw), 0.0],
                [math.sin(yaw), math.cos(yaw), 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        scale = rng.uniform(0.35, 0.8, size=3)
        offset = rng.uniform(-0.55, 0.55, size=3)
        pieces.append(base @ rot.T * scale + offset)
    return np.concatenate(pieces, axis=0)


def _project(segments: np.ndarray, azimuth: float, elevation: float) -> np.ndarray:
    """Orthographic screen coordinates (x right, y up) for one camera angle."""
    ca, sa = math.cos(azimuth), math.sin(azimuth)
    ce, se = math.cos(elevation), math.sin(elevation)
    rot_z = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    rot_x = np.array([[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]])
    pts = segments @ (rot_x @ rot_z).T
    return pts[..., [0, 2]]


def _draw_capsule(img: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float):
    """Ink every pixel whose center lies within ``radius`` of segment ab."""
    h, w = img.shape
    x0 = max(int(math.floor(min(a[0], b[0]) - radius - 1)), 0)
    x1 = min(int(math.ceil(max(a[0], b[0]) + radius + 1)), w - 1)
    y0 = max(int(math.floor(min(a[1], b[1]) - radius - 1)), 0)
    y1 = min(int(math.ceil(max(a[1], b[1]) + radius + 1)), h - 1)
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
    ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        t = np.zeros((y1 - y0 + 1, x1 - x0 + 1))
    else:
        t = np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / denom, 0.0, 1.0)
    dx = xs - (a[0] + t * ab[0])
    dy = ys - (a[1] + t * ab[1])
    region = img[y0 : y1 + 1, x0 : x1 + 1]
    region[dx * dx + dy * dy <= radius * radius] = INK


def _rasterize(segs2d: np.ndarray, image_size: int, stroke_width: int) -> np.ndarray:
    pts = segs2d.reshape(-1, 2)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
    margin = 2.0 * stroke_width + 0.05 * image_size
    scale = (image_size - 1 - 2.0 * margin) / span
    mid = (lo + hi) / 2.0
    center = (image_size - 1) / 2.0
    img = np.full((image_size, image_size), BACKGROUND, dtype=np.uint8)
    radius = stroke_width / 2.0
    for seg in segs2d:
        # flip y so +y in object space points up on screen
        a = np.array([(seg[0, 0] - mid[0]) * scale + center,
                      center - (seg[0, 1] - mid[1]) * scale])
        b = np.array([(seg[1, 0] - mid[0]) * scale + center,
                      center - (seg[1, 1] - mid[1]) * scale])
        _draw_capsule(img, a, b, radius)
    return img


_ELEVATIONS = (0.2, 0.55, 0.85, 0.35)


def generate_synthetic(
    out_dir,
    num_ids: int,
    views_per_id: int,
    image_size: int = 64,
    stroke_width: int = 2,
    seed: int = 0,
    val_fraction: float = 0.25,
) -> DatasetManifest:
    """Render ``num_ids`` wireframe objects from ``views_per_id`` angles each.

    Writes 8-bit grayscale PNGs under ``out_dir/images`` plus a manifest
    at ``out_dir/manifest.jsonl`` with an ID-disjoint train/val split.
    Bitwise deterministic given ``seed``.
    """
    if num_ids < 2 or views_per_id < 2:
        raise ValueError("need num_ids >= 2 and views_per_id >= 2")
    if stroke_width < 1:
        raise ValueError("stroke_width must be >= 1")
    if image_size < 8 * stroke_width:
        raise ValueError(
            f"image_size {image_size} too small to render stroke_width "
            f"{stroke_width} (need at least {8 * stroke_width})"
        )
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    id_seqs = np.random.SeedSequence(seed).spawn(num_ids)
    entries = []
    for i in range(num_ids):
        pid = f"SYN{i:05d}"
        segs3d = _make_object(np.random.default_rng(id_seqs[i]))
        view_seqs = id_seqs[i].spawn(views_per_id)
        for v in range(views_per_id):
            vrng = np.random.default_rng(view_seqs[v])
            azimuth = 2.0 * math.pi * v / views_per_id + vrng.uniform(-0.25, 0.25)
            elevation = _ELEVATIONS[v % len(_ELEVATIONS)] + vrng.uniform(-0.08, 0.08)
            raster = _rasterize(
                _project(segs3d, azimuth, elevation), image_size, stroke_width
            )
            drawing = DrawingImage(raster, pid, v)
            validate_drawing(drawing)
            rel = f"images/{pid}_v{v}.png"
            Image.fromarray(raster, mode="L").save(out_dir / rel)
            entries.append(ManifestEntry(rel, pid, v, "train"))
    manifest = split_by_id(DatasetManifest(out_dir, entries), val_fraction, seed)
    save_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# manifest I/O


def save_manifest(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path else manifest.root_dir / "manifest.jsonl"
    with open(path, "w") as f:
        for e in manifest.entries:
            f.write(
                json.dumps(
                    {
                        "image_path": e.image_path,
                        "patent_id": e.patent_id,
                        "view_index": e.view_index,
                        "split": e.split,
                    }
                )
                + "\n"
            )
    return path


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a JSON-lines manifest; paths resolve against its dir."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    seen: dict = {}
    split_of: dict = {}
    val_count: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"line {lineno}: invalid JSON ({e.msg})") from e
        try:
            entry = ManifestEntry(
                image_path=str(obj["image_path"]),
                patent_id=str(obj["patent_id"]),
                view_index=int(obj["view_index"]),
                split=str(obj["split"]),
            )
        except KeyError as e:
            raise ManifestError(f"line {lineno}: missing field {e.args[0]!r}") from e
        if entry.split not in ("train", "val"):
            raise ManifestError(
                f"line {lineno}: split must be 'train' or 'val', got {entry.split!r}"
            )
        key = (entry.patent_id, entry.view_index)
        if key in seen:
            raise ManifestError(
                f"line {lineno}: duplicate (patent_id, view_index) "
                f"('{entry.patent_id}', {entry.view_index}), first at line {seen[key]}"
            )
        seen[key] = lineno
        prior = split_of.get(entry.patent_id)
        if prior is not None and prior != entry.split:
            raise ManifestError(
                f"line {lineno}: patent_id '{entry.patent_id}' appears in "
                "both train and val"
            )
        split_of[entry.patent_id] = entry.split
        if entry.split == "val":
            val_count[entry.patent_id] = val_count.get(entry.patent_id, 0) + 1
        if check_files and not (root / entry.image_path).exists():
            raise ManifestError(
                f"line {lineno}: image file not found: {root / entry.image_path}"
            )
        entries.append(entry)
    lonely = sorted(pid for pid, n in val_count.items() if n < 2)
    if lonely:
        raise ManifestError(
            "val split needs >= 2 images per patent_id; offending IDs: "
            + ", ".join(lonely)
        )
    return DatasetManifest(root, entries)


def split_by_id(manifest: DatasetManifest, val_fraction: float, seed: int) -> DatasetManifest:
    """Reassign splits by partitioning patent IDs, never individual images."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be strictly between 0 and 1")
    ids = manifest.ids()
    n_val = int(round(len(ids) * val_fraction))
    if n_val == 0 or n_val == len(ids):
        raise ValueError(
            f"val_fraction {val_fraction} gives an empty split for {len(ids)} IDs"
        )
    perm = np.random.default_rng(seed).permutation(len(ids))
    val_ids = {ids[j] for j in perm[:n_val]}
    entries = [
        replace(e, split="val" if e.patent_id in val_ids else "train")
        for e in manifest.entries
    ]
    return DatasetManifest(manifest.root_dir, entries)


def read_drawing(source, name: str = "") -> DrawingImage:
    """Read a grayscale drawing from a path or binary file-like object."""
    label = name or str(source)
    try:
        with Image.open(source) as im:
            pixels = np.asarray(im.convert("L"), dtype=np.uint8)
    except FileNotFoundError:
        raise ManifestError(f"image file not found: {label}") from None
    except OSError as e:
        raise ManifestError(f"cannot decode image {label}: {e}") from e
    return DrawingImage(pixels)


def load_image(manifest: DatasetManifest, entry: ManifestEntry) -> DrawingImage:
    """Read one manifest entry as a grayscale drawing (PNG or PGM)."""
    drawing = read_drawing(manifest.root_dir / entry.image_path)
    return DrawingImage(drawing.pixels, entry.patent_id, entry.view_index)
