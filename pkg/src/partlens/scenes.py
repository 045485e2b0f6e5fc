"""Synthetic scenes of glyph parts on cluttered canvases, with exact landmarks.

Each scene is an object made of K glyph parts placed at category-specific
offsets around a jittered object center, over a noisy background. Landmarks
are the glyph centroids, so part-localization metrics can be scored against
exact ground truth.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError, CorruptDataError

GLYPH_NAMES = ("cross", "disc", "l_corner", "bar", "ring", "wedge")

MANIFEST_VERSION = 1

_F32_MAGIC = b"PLF0"


def glyph_mask(name: str, size: int = 9) -> np.ndarray:
    """Binary (size x size) mask for one of the procedural part glyphs."""
    if size < 5 or size % 2 == 0:
        raise ContractError(f"glyph size must be odd and >= 5, got {size}")
    c = size // 2
    t = max(size // 3, 2)
    rr, cc = np.mgrid[0:size, 0:size]
    lo, hi = c - t // 2, c + t // 2 + 1
    if name == "cross":
        m = ((rr >= lo) & (rr < hi)) | ((cc >= lo) & (cc < hi))
    elif name == "disc":
        m = (rr - c) ** 2 + (cc - c) ** 2 <= (size / 2 - 0.5) ** 2
    elif name == "l_corner":
        m = (cc < t) | (rr >= size - t)
    elif name == "bar":
        m = (rr >= lo) & (rr < hi)
    elif name == "ring":
        d2 = (rr - c) ** 2 + (cc - c) ** 2
        m = (d2 <= (size / 2 - 0.5) ** 2) & (d2 >= (size / 2 - 0.5 - t) ** 2)
    elif name == "wedge":
        m = rr >= cc
    else:
        raise ContractError(f"unknown glyph {name!r}, expected one of {GLYPH_NAMES}")
    return m.astype(np.float64)


def glyph_centroid(name: str, size: int = 9) -> tuple[float, float]:
    """(row, col) centroid of the glyph mask, relative to its top-left corner."""
    m = glyph_mask(name, size)
    rs, cs = np.nonzero(m)
    return float(rs.mean()), float(cs.mean())


@dataclass(frozen=True)
class CategorySpec:
    """One object category: which glyphs it is made of and where they sit.

    Offsets are (row, col) displacements in pixels from the object center at
    nominal scale 1.
    """

    name: str
    glyphs: tuple[str, ...]
    offsets: tuple[tuple[float, float], ...]
    glyph_size: int = 9

    def __post_init__(self):
        if len(self.glyphs) != len(self.offsets):
            raise ConfigError(
                f"category {self.name!r}: {len(self.glyphs)} glyphs but "
                f"{len(self.offsets)} offsets"
            )
        if len(self.glyphs) < 2:
            raise ConfigError(f"category {self.name!r} needs >= 2 parts")
        for g in self.glyphs:
            if g not in GLYPH_NAMES:
                raise ConfigError(f"category {self.name!r}: unknown glyph {g!r}")

    @property
    def num_parts(self) -> int:
        return len(self.glyphs)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "glyphs": list(self.glyphs),
            "offsets": [list(o) for o in self.offsets],
            "glyph_size": self.glyph_size,
        }

    @staticmethod
    def from_dict(d: dict) -> "CategorySpec":
        return CategorySpec(
            name=d["name"],
            glyphs=tuple(d["glyphs"]),
            offsets=tuple((float(r), float(c)) for r, c in d["offsets"]),
            glyph_size=int(d["glyph_size"]),
        )


@dataclass
class SyntheticScene:
    """A rendered scene: image, category label, exact part landmarks, bbox."""

    image: np.ndarray  # (S, S) float32 in [0, 1], values quantized to k/255
    label: int
    landmarks: np.ndarray  # (K, 2) float64, (row, col) per part
    object_bbox: tuple[int, int, int, int]  # (top, left, height, width)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.image)):
            raise ContractError("scene image contains non-finite values")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ContractError("scene image values outside [0, 1]")
        top, left, h, w = self.object_bbox
        inside = (
            (self.landmarks[:, 0] >= top)
            & (self.landmarks[:, 0] <= top + h - 1)
            & (self.landmarks[:, 1] >= left)
            & (self.landmarks[:, 1] <= left + w - 1)
        )
        if not inside.all():
            raise ContractError("landmark outside object bbox")


def default_categories(
    num_categories: int, parts_per_category: int, image_size: int
) -> list[CategorySpec]:
    """Category layouts used when none are given: parts on a ring.

    Categories differ in ring radius, angular phase, and glyph assignment so
    a small classifier can separate them.
    """
    if num_categories < 1:
        raise ConfigError("need at least one category")
    if parts_per_category < 2:
        raise ConfigError("need at least two parts per category")
    specs = []
    for c in range(num_categories):
        radius = image_size * (0.22 - 0.04 * (c % 2))
        phase = math.pi * c / (2.0 * max(num_categories, 2))
        offsets = []
        for k in range(parts_per_category):
            theta = phase + 2.0 * math.pi * k / parts_per_category
            offsets.append((radius * math.sin(theta), radius * math.cos(theta)))
        glyphs = tuple(
            GLYPH_NAMES[(2 * c + k) % len(GLYPH_NAMES)]
            for k in range(parts_per_category)
        )
        specs.append(
            CategorySpec(name=f"cat{c}", glyphs=glyphs, offsets=tuple(offsets))
        )
    return specs


def validate_placement(
    spec: CategorySpec,
    image_size: int,
    jitter_frac: float,
    scale_max: float,
) -> tuple[float, float]:
    """Check the category fits on the canvas under worst-case jitter.

    Returns the per-axis margins the object center must keep from the canvas
    edge. Raises ConfigError when no valid center exists.
    """
    half = spec.glyph_size // 2
    jit = jitter_frac * image_size
    m_r = max(abs(o[0]) for o in spec.offsets) * scale_max + jit + half + 1
    m_c = max(abs(o[1]) for o in spec.offsets) * scale_max + jit + half + 1
    if m_r > (image_size - 1) / 2 or m_c > (image_size - 1) / 2:
        raise ConfigError(
            f"category {spec.name!r} cannot fit a {image_size}x{image_size} "
            f"canvas under maximal jitter (margins {m_r:.1f}, {m_c:.1f})"
        )
    return m_r, m_c


def render_clutter(
    rng: np.random.Generator,
    image_size: int,
    noise_sigma: float = 0.04,
    num_dots: int = 5,
) -> np.ndarray:
    """Background clutter: gaussian pixel noise plus a few dim speckle dots."""
    canvas = rng.normal(0.0, noise_sigma, size=(image_size, image_size))
    for _ in range(num_dots):
        r = int(rng.integers(0, image_size - 2))
        c = int(rng.integers(0, image_size - 2))
        side = int(rng.integers(2, 4))
        val = rng.uniform(0.15, 0.35)
        canvas[r : r + side, c : c + side] += val
    return np.clip(canvas, 0.0, 1.0)


def _quantize(canvas: np.ndarray) -> np.ndarray:
    img8 = np.round(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img8.astype(np.float32) / 255.0


def generate_clutter_image(rng: np.random.Generator, image_size: int) -> np.ndarray:
    """A scene-less clutter image (used as the negative class when C=1)."""
    return _quantize(render_clutter(rng, image_size))


def generate_scene(
    spec: CategorySpec,
    rng: np.random.Generator | int,
    *,
    label: int = 0,
    image_size: int = 64,
    jitter_frac: float = 0.1,
    scale_range: tuple[float, float] = (0.9, 1.1),
    noise_sigma: float = 0.04,
    clutter_dots: int = 5,
) -> SyntheticScene:
    """Render one scene. Deterministic for a given rng state.

    The object gets one global translation and scale; each part additionally
    gets independent jitter bounded by jitter_frac * image_size per axis.
    """
    if image_size < 32:
        raise ConfigError(f"image_size must be >= 32, got {image_size}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    m_r, m_c = validate_placement(spec, image_size, jitter_frac, scale_range[1])

    canvas = render_clutter(rng, image_size, noise_sigma, clutter_dots)

    scale = rng.uniform(scale_range[0], scale_range[1])
    center_r = rng.uniform(m_r, image_size - 1 - m_r)
    center_c = rng.uniform(m_c, image_size - 1 - m_c)
    jit = jitter_frac * image_size

    half = spec.glyph_size // 2
    landmarks = np.zeros((spec.num_parts, 2), dtype=np.float64)
    tops, lefts = [], []
    for k, (gname, (dr, dc)) in enumerate(zip(spec.glyphs, spec.offsets)):
        jr = rng.uniform(-jit, jit)
        jc = rng.uniform(-jit, jit)
        intensity = rng.uniform(0.75, 1.0)
        pr = int(round(center_r + scale * dr + jr))
        pc = int(round(center_c + scale * dc + jc))
        top, left = pr - half, pc - half
        mask = glyph_mask(gname, spec.glyph_size)
        region = canvas[top : top + spec.glyph_size, left : left + spec.glyph_size]
        np.maximum(region, mask * intensity, out=region)
        cr, cc = glyph_centroid(gname, spec.glyph_size)
        landmarks[k] = (top + cr, left + cc)
        tops.append(top)
        lefts.append(left)

    top = min(tops)
    left = min(lefts)
    height = max(tops) + spec.glyph_size - top
    width = max(lefts) + spec.glyph_size - left

    scene = SyntheticScene(
        image=_quantize(canvas),
        label=label,
        landmarks=landmarks,
        object_bbox=(top, left, height, width),
    )
    scene.validate()
    return scene


def scene_rng(master_seed: int, index: int) -> np.random.Generator:
    """Per-scene generator: each scene owns a stream derived from seed+index."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, index, 0]))


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    seed: int
    image_size: int
    image_format: str  # "png" or "f32"
    categories: list[CategorySpec]
    scenes: list[dict]  # {index, category, label, landmarks, bbox, file}
    splits: dict[str, list[int]]
    checksums: dict[str, str]
    generation: dict = field(default_factory=dict)

    @property
    def num_scenes(self) -> int:
        return len(self.scenes)

    def to_dict(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "seed": self.seed,
            "image_size": self.image_size,
            "image_format": self.image_format,
            "categories": [c.to_dict() for c in self.categories],
            "scenes": self.scenes,
            "splits": self.splits,
            "checksums": self.checksums,
            "generation": self.generation,
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetManifest":
        if d.get("format_version") != MANIFEST_VERSION:
            raise CorruptDataError(
                f"unsupported manifest version {d.get('format_version')!r}"
            )
        return DatasetManifest(
            seed=d["seed"],
            image_size=d["image_size"],
            image_format=d["image_format"],
            categories=[CategorySpec.from_dict(c) for c in d["categories"]],
            scenes=d["scenes"],
            splits={k: list(v) for k, v in d["splits"].items()},
            checksums=d["checksums"],
            generation=d.get("generation", {}),
        )


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _image_bytes(image: np.ndarray, fmt: str) -> bytes:
    if fmt == "png":
        img8 = np.round(image * 255.0).astype(np.uint8)
        import io

        buf = io.BytesIO()
        Image.fromarray(img8, mode="L").save(buf, format="PNG")
        return buf.getvalue()
    if fmt == "f32":
        h, w = image.shape
        return _F32_MAGIC + struct.pack("<II", h, w) + image.astype("<f4").tobytes()
    raise ConfigError(f"unknown image format {fmt!r}")


def _decode_image(data: bytes, fmt: str, path: str) -> np.ndarray:
    if fmt == "png":
        import io

        img8 = np.asarray(Image.open(io.BytesIO(data)), dtype=np.uint8)
        return img8.astype(np.float32) / 255.0
    if fmt == "f32":
        if data[:4] != _F32_MAGIC:
            raise CorruptDataError(f"{path}: bad f32 header")
        h, w = struct.unpack("<II", data[4:12])
        arr = np.frombuffer(data[12:], dtype="<f4")
        if arr.size != h * w:
            raise CorruptDataError(f"{path}: truncated f32 payload")
        return arr.reshape(h, w).astype(np.float32)
    raise CorruptDataError(f"{path}: unknown image format {fmt!r}")


def _split_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    return n_train, n_val, n - n_train - n_val


def generate_dataset(
    out_dir: Path | str,
    *,
    seed: int,
    num_scenes: int,
    categories: list[CategorySpec] | None = None,
    num_categories: int = 2,
    parts_per_category: int = 4,
    image_size: int = 64,
    image_format: str = "png",
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    jitter_frac: float = 0.1,
    scale_range: tuple[float, float] = (0.9, 1.1),
    noise_sigma: float = 0.04,
    clutter_dots: int = 5,
) -> DatasetManifest:
    """Generate scenes to disk plus a manifest. Pure function of its arguments.

    Scene i belongs to category i % C. Splits are a seeded shuffle of the
    scene indices cut at the given fractions.
    """
    out_dir = Path(out_dir)
    if categories is None:
        categories = default_categories(num_categories, parts_per_category, image_size)
    if abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {split_fractions}")
    for spec in categories:
        validate_placement(spec, image_size, jitter_frac, scale_range[1])

    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    ext = "png" if image_format == "png" else "f32"
    records = []
    checksums = {}
    for i in range(num_scenes):
        cat_idx = i % len(categories)
        scene = generate_scene(
            categories[cat_idx],
            scene_rng(seed, i),
            label=cat_idx,
            image_size=image_size,
            jitter_frac=jitter_frac,
            scale_range=scale_range,
            noise_sigma=noise_sigma,
            clutter_dots=clutter_dots,
        )
        fname = f"images/scene_{i:05d}.{ext}"
        data = _image_bytes(scene.image, image_format)
        try:
            (out_dir / fname).write_bytes(data)
        except OSError as exc:
            raise ConfigError(f"cannot write {out_dir / fname}: {exc}") from exc
        checksums[fname] = _sha256(data)
        records.append(
            {
                "index": i,
                "category": categories[cat_idx].name,
                "label": cat_idx,
                "landmarks": [[float(r), float(c)] for r, c in scene.landmarks],
                "bbox": list(scene.object_bbox),
                "file": fname,
            }
        )

    split_gen = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    perm = split_gen.permutation(num_scenes)
    n_train, n_val, _ = _split_counts(num_scenes, split_fractions)
    splits = {
        "train": sorted(int(i) for i in perm[:n_train]),
        "val": sorted(int(i) for i in perm[n_train : n_train + n_val]),
        "test": sorted(int(i) for i in perm[n_train + n_val :]),
    }

    manifest = DatasetManifest(
        seed=seed,
        image_size=image_size,
        image_format=image_format,
        categories=list(categories),
        scenes=records,
        splits=splits,
        checksums=checksums,
        generation={
            "num_scenes": num_scenes,
            "split_fractions": list(split_fractions),
            "jitter_frac": jitter_frac,
            "scale_range": list(scale_range),
            "noise_sigma": noise_sigma,
            "clutter_dots": clutter_dots,
        },
    )
    manifest_text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"
    (out_dir / "manifest.json").write_text(manifest_text)
    return manifest


def read_manifest(manifest_path: Path | str) -> DatasetManifest:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise CorruptDataError(f"manifest not found: {manifest_path}")
    return DatasetManifest.from_dict(json.loads(manifest_path.read_text()))


def load_dataset(
    manifest_path: Path | str,
) -> Iterator[tuple[SyntheticScene, str]]:
    """Yield (scene, split_tag) in manifest order, verifying file checksums."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent
    tag_of = {}
    for tag, idxs in manifest.splits.items():
        for i in idxs:
            tag_of[i] = tag
    for rec in manifest.scenes:
        fname = rec["file"]
        fpath = root / fname
        if not fpath.exists():
            raise CorruptDataError(f"dataset file missing: {fpath}")
        data = fpath.read_bytes()
        if _sha256(data) != manifest.checksums.get(fname):
            raise CorruptDataError(f"checksum mismatch for {fpath}")
        scene = SyntheticScene(
            image=_decode_image(data, manifest.image_format, fname),
            label=int(rec["label"]),
            landmarks=np.asarray(rec["landmarks"], dtype=np.float64),
            object_bbox=tuple(rec["bbox"]),
        )
        yield scene, tag_of[rec["index"]]


def load_split_arrays(
    manifest_path: Path | str, split: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Load one split as dense arrays: images (N,1,S,S), labels, landmarks, bboxes."""
    manifest = read_manifest(manifest_path)
    if split not in manifest.splits:
        raise ContractError(f"unknown split {split!r}")
    images, labels, landmarks, bboxes = [], [], [], []
    for scene, tag in load_dataset(manifest_path):
        if tag != split:
            continue
        images.append(scene.image[None, :, :])
        labels.append(scene.label)
        landmarks.append(scene.landmarks)
        bboxes.append(scene.object_bbox)
    if not images:
        raise ContractError(f"split {split!r} is empty")
    return (
        np.stack(images).astype(np.float32),
        np.asarray(labels, dtype=np.int64),
        np.stack(landmarks),
        np.asarray(bboxes, dtype=np.int64),
    )
