"""Synthetic multimodal inspection data: generation, on-disk layout, loaders.

Every sample is rendered from a smooth seeded height field seen by a pinhole
camera, giving an organized point cloud (one 3D point per pixel) registered
to an RGB raster. Anomalous samples carry geometric bumps/dents (which leave
colour untouched) or colour blots (which leave geometry untouched).

On-disk layout::

    <root>/<category>/manifest.json
    <root>/<category>/<split>/<sample_id>/rgb.png
                                         /points.bin
                                         /intrinsics.json
                                         /fg_mask.png
                                         /gt_mask.png      (anomalous only)

``points.bin`` (all little-endian)::

    b"MMPT"  u16 version=1  u16 reserved=0  u32 H  u32 W
    float32[H*W*3]            xyz per pixel, row-major
    u8[ceil(H*W/8)]           validity bitmap, np.packbits(bitorder="little")
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, FormatError, SampleNotFoundError
from .grids import MODALITIES, FeatureGrid

DEFECT_KINDS = ("geometric_bump", "geometric_dent", "color_blot")
MANIFEST_FORMAT = "mmfa-dataset/1"

_PTS_MAGIC = b"MMPT"
_PTS_HEADER = struct.Struct("<4sHHII")


@dataclass
class MultimodalSample:
    rgb: np.ndarray
    points: np.ndarray
    valid: np.ndarray
    intrinsics: np.ndarray
    fg_mask: np.ndarray
    gt_mask: np.ndarray | None = None
    label: str = "normal"
    sample_id: str = ""

    @property
    def image_size(self) -> tuple[int, int]:
        return self.rgb.shape[0], self.rgb.shape[1]

    @property
    def is_anomalous(self) -> bool:
        return self.label == "anomalous"


@dataclass(frozen=True)
class DefectSpec:
    kind: str
    center: tuple[int, int]  # (u, v) = (column, row)
    radius: float
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise ConfigurationError(f"unknown defect kind {self.kind!r}")
        if not self.radius > 0:
            raise ConfigurationError("defect radius must be positive")
        if self.magnitude == 0:
            raise ConfigurationError("defect magnitude must be non-zero")

    def footprint(self, shape: tuple[int, int]) -> np.ndarray:
        rows, cols = np.mgrid[: shape[0], : shape[1]]
        r2 = (cols - self.center[0]) ** 2 + (rows - self.center[1]) ** 2
        return r2 < self.radius**2

    def profile(self, shape: tuple[int, int]) -> np.ndarray:
        """Smooth cos^2 falloff, strictly positive on the footprint, zero outside."""
        rows, cols = np.mgrid[: shape[0], : shape[1]]
        r = np.hypot(cols - self.center[0], rows - self.center[1]) / self.radius
        return np.where(r < 1.0, np.cos(0.5 * np.pi * r) ** 2, 0.0)


@dataclass
class CategorySpec:
    """Knobs for one synthetic object category."""

    name: str
    shape: str = "dome"  # dome | tile | ridge
    image_size: tuple[int, int] = (64, 64)
    defect_kinds: tuple[str, ...] = DEFECT_KINDS
    base_color: tuple[float, float, float] = (0.55, 0.45, 0.35)
    texture_amp: float = 0.03
    pixel_noise: float = 0.01
    warp_amp: float = 0.012
    radius_range: tuple[float, float] = (3.0, 5.0)
    height_range: tuple[float, float] = (0.05, 0.08)
    color_range: tuple[float, float] = (0.15, 0.25)
    invalid_fraction: float = 0.003
    center_jitter: float = 0.5
    scale_jitter: float = 0.02

    def __post_init__(self):
        if self.shape not in ("dome", "tile", "ridge"):
            raise ConfigurationError(f"unknown category shape {self.shape!r}")
        h, w = self.image_size
        if h < 16 or w < 16 or h > 224 or w > 224:
            raise ConfigurationError("image size must lie in [16, 224]")
        for kind in self.defect_kinds:
            if kind not in DEFECT_KINDS:
                raise ConfigurationError(f"unknown defect kind {kind!r}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "CategorySpec":
        d = dict(d)
        for key in ("image_size", "defect_kinds", "base_color", "radius_range",
                    "height_range", "color_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


DEFAULT_CATEGORIES = (
    CategorySpec("dome", shape="dome", base_color=(0.62, 0.48, 0.30)),
    CategorySpec("tile", shape="tile", base_color=(0.40, 0.52, 0.60)),
    CategorySpec("ridge", shape="ridge", base_color=(0.50, 0.58, 0.42)),
)


@dataclass
class DatasetManifest:
    root: Path
    category: str
    split: str
    sample_ids: list[str]
    seed: int
    image_size: tuple[int, int]
    labels: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        self.image_size = tuple(self.image_size)
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise FormatError("duplicate sample ids in manifest")
        if self.split == "train" and any(self.labels.get(s, "normal") != "normal"
                                         for s in self.sample_ids):
            raise FormatError("train split may only contain normal samples")

    @property
    def category_dir(self) -> Path:
        return self.root / self.category

    def sample_dir(self, sample_id: str) -> Path:
        return self.category_dir / self.split / sample_id

    def label(self, sample_id: str) -> str:
        return self.labels.get(sample_id, "normal")

    def subset(self, sample_ids) -> "DatasetManifest":
        ids = list(sample_ids)
        return replace(self, sample_ids=ids,
                       labels={s: self.labels.get(s, "normal") for s in ids})

    def __len__(self):
        return len(self.sample_ids)


# ---------------------------------------------------------------------------
# rendering


def default_intrinsics(image_size: tuple[int, int]) -> np.ndarray:
    h, w = image_size
    f = 1.1 * w
    return np.array([[f, 0.0, (w - 1) / 2.0], [0.0, f, (h - 1) / 2.0], [0.0, 0.0, 1.0]])


def backproject(depth: np.ndarray, intrinsics: np.ndarray) -> np.ndarray:
    """Organized H x W x 3 cloud whose point (row, col) projects to pixel (row, col)."""
    h, w = depth.shape
    rows, cols = np.mgrid[:h, :w].astype(np.float64)
    fx, fy = intrinsics[0, 0], intrinsics[1, 1]
    cx, cy = intrinsics[0, 2], intrinsics[1, 2]
    return np.stack([(cols - cx) * depth / fx, (rows - cy) * depth / fy, depth], axis=-1)


def _sample_rng(seed: int, category: str, split: str, index: int) -> np.random.Generator:
    key = [int(seed), zlib.crc32(category.encode()), zlib.crc32(split.encode()), int(index)]
    return np.random.default_rng(np.random.SeedSequence(key))


def _gratings(rng, shape, n, amp, freq_range):
    h, w = shape
    rows, cols = np.mgrid[:h, :w].astype(np.float64)
    out = np.zeros(shape)
    for _ in range(n):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(*freq_range)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(freq * (np.cos(theta) * cols + np.sin(theta) * rows) + phase)
    return amp * out / np.sqrt(n)


def _object_shape(spec: CategorySpec, rng, shape):
    """Footprint mask and base height field of the object (before defects)."""
    h, w = shape
    rows, cols = np.mgrid[:h, :w].astype(np.float64)
    cu = (w - 1) / 2 + rng.uniform(-1.0, 1.0) * spec.center_jitter
    cv = (h - 1) / 2 + rng.uniform(-1.0, 1.0) * spec.center_jitter
    scale = 1.0 + rng.uniform(-1.0, 1.0) * spec.scale_jitter
    a = 0.34 * w * scale
    b = 0.30 * h * scale
    x = (cols - cu) / a
    y = (rows - cv) / b
    if spec.shape == "dome":
        rho2 = x**2 + y**2
        fg = rho2 < 1.0
        height = 0.12 + 0.10 * (1.0 - rho2)
    elif spec.shape == "tile":
        rho2 = x**4 + y**4
        fg = rho2 < 1.0
        height = 0.14 + 0.02 * (1.0 - rho2)
    else:
        rho2 = x**2 + y**2
        fg = rho2 < 1.0
        height = 0.13 + 0.05 * np.cos(np.pi * 1.5 * x) ** 2
    height = height + _gratings(rng, shape, 3, spec.warp_amp, (0.08, 0.2))
    return fg, np.where(fg, height, 0.0)


def render_sample(spec: CategorySpec, sample_seed, defects=(), sample_id: str = "") -> MultimodalSample:
    """Render one sample. ``sample_seed`` fixes everything except the defects,
    so calling again with ``defects=()`` yields the defect-free twin."""
    rng = np.random.default_rng(sample_seed)
    shape = tuple(spec.image_size)
    K = default_intrinsics(shape)

    tilt_x, tilt_y = rng.uniform(-0.08, 0.08, size=2)
    fg, height = _object_shape(spec, rng, shape)

    base = np.asarray(spec.base_color) * rng.uniform(0.95, 1.05)
    texture = _gratings(rng, shape, 4, spec.texture_amp, (0.25, 0.9))
    noise = rng.normal(0.0, spec.pixel_noise, size=shape + (3,))
    bg_texture = _gratings(rng, shape, 2, 0.03, (0.1, 0.5))
    invalid = rng.random(shape) < spec.invalid_fraction

    rgb = np.where(fg[..., None], base + texture[..., None], 0.30 + bg_texture[..., None])
    rgb = rgb + noise

    gt = np.zeros(shape, dtype=bool)
    for d in defects:
        foot = d.footprint(shape) & fg
        prof = d.profile(shape)
        if d.kind == "color_blot":
            drng = np.random.default_rng(d.seed)
            direction = drng.normal(size=3)
            direction /= np.linalg.norm(direction)
            rgb = np.where(foot[..., None], rgb + d.magnitude * direction, rgb)
        else:
            sign = 1.0 if d.kind == "geometric_bump" else -1.0
            height = height + sign * abs(d.magnitude) * prof * fg
        gt |= foot
    rgb = np.clip(rgb, 0.0, 1.0)

    # background plane through (0, 0, 1) with a small seeded tilt; raised
    # surfaces move toward the camera along each pixel ray
    rows, cols = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    rx = (cols - K[0, 2]) / K[0, 0]
    ry = (rows - K[1, 2]) / K[1, 1]
    plane_depth = 1.0 / (1.0 - np.tan(tilt_x) * rx - np.tan(tilt_y) * ry)
    depth = plane_depth - height
    points = backproject(depth, K)
    valid = ~invalid
    points[~valid] = 0.0

    anomalous = bool(gt.any())
    return MultimodalSample(
        rgb=rgb,
        points=points,
        valid=valid,
        intrinsics=K,
        fg_mask=fg,
        gt_mask=gt if anomalous else None,
        label="anomalous" if anomalous else "normal",
        sample_id=sample_id,
    )


def sample_defect(spec: CategorySpec, fg_mask: np.ndarray, rng: np.random.Generator) -> DefectSpec:
    """Draw a defect whose footprint lies fully inside the foreground."""
    kind = spec.defect_kinds[rng.integers(len(spec.defect_kinds))]
    radius = float(rng.uniform(*spec.radius_range))
    depth_inside = ndimage.distance_transform_edt(fg_mask)
    rows, cols = np.nonzero(depth_inside >= radius + 1.5)
    if rows.size == 0:
        raise ConfigurationError("object too small for the requested defect radius")
    i = rng.integers(rows.size)
    if kind == "color_blot":
        magnitude = float(rng.uniform(*spec.color_range))
    else:
        magnitude = float(rng.uniform(*spec.height_range))
        if kind == "geometric_dent":
            magnitude = -magnitude
    return DefectSpec(kind, (int(cols[i]), int(rows[i])), radius, magnitude,
                      seed=int(rng.integers(2**31)))


# ---------------------------------------------------------------------------
# disk IO


def _write_png(path: Path, array: np.ndarray):
    Image.fromarray(array).save(path, format="PNG")


def _mask_to_png(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 255, 0).astype(np.uint8)


def write_points(path: Path, points: np.ndarray, valid: np.ndarray):
    h, w, _ = points.shape
    payload = np.ascontiguousarray(points, dtype="<f4").tobytes()
    bitmap = np.packbits(valid.reshape(-1).astype(bool), bitorder="little").tobytes()
    with open(path, "wb") as fh:
        fh.write(_PTS_HEADER.pack(_PTS_MAGIC, 1, 0, h, w))
        fh.write(payload)
        fh.write(bitmap)


def read_points(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _PTS_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, _, h, w = _PTS_HEADER.unpack_from(raw)
    if magic != _PTS_MAGIC or version != 1:
        raise FormatError(f"{path}: not a points file (magic={magic!r}, version={version})")
    n = h * w
    expected = _PTS_HEADER.size + 12 * n + (n + 7) // 8
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = _PTS_HEADER.size
    points = np.frombuffer(raw, dtype="<f4", count=3 * n, offset=off).reshape(h, w, 3)
    bits = np.frombuffer(raw, dtype=np.uint8, offset=off + 12 * n)
    valid = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(h, w)
    return points.astype(np.float64), valid


def save_sample(sample: MultimodalSample, directory: Path):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rgb8 = np.round(np.clip(sample.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    _write_png(directory / "rgb.png", rgb8)
    write_points(directory / "points.bin", sample.points, sample.valid)
    (directory / "intrinsics.json").write_text(
        json.dumps({"K": np.asarray(sample.intrinsics).tolist()}, indent=2) + "\n")
    _write_png(directory / "fg_mask.png", _mask_to_png(sample.fg_mask))
    if sample.gt_mask is not None:
        _write_png(directory / "gt_mask.png", _mask_to_png(sample.gt_mask))


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im) > 127


def generate_dataset(category_spec: CategorySpec, n_train: int, n_test_normal: int,
                     n_test_anomalous: int, seed: int, root) -> tuple[DatasetManifest, DatasetManifest]:
    """Render and write train/test splits; returns their manifests."""
    if min(n_train, n_test_normal, n_test_anomalous) < 0:
        raise ConfigurationError("sample counts must be non-negative")
    if n_train == 0:
        raise ConfigurationError("n_train must be positive: memory banks cannot initialize")
    spec = category_spec
    root = Path(root)
    cat_dir = root / spec.name
    cat_dir.mkdir(parents=True, exist_ok=True)

    train_ids = [f"train_{i:03d}" for i in range(n_train)]
    seeds = {}
    for i, sid in enumerate(train_ids):
        seeds[sid] = int(_sample_rng(seed, spec.name, "train", i).integers(2**63))
        sample = render_sample(spec, seeds[sid], sample_id=sid)
        save_sample(sample, cat_dir / "train" / sid)

    n_test = n_test_normal + n_test_anomalous
    order_rng = _sample_rng(seed, spec.name, "test-order", 0)
    is_anom = np.zeros(n_test, dtype=bool)
    is_anom[order_rng.permutation(n_test)[:n_test_anomalous]] = True
    test_ids = [f"test_{i:03d}" for i in range(n_test)]
    test_labels = {}
    defect_log = {}
    for i, sid in enumerate(test_ids):
        rng = _sample_rng(seed, spec.name, "test", i)
        sample_seed = seeds[sid] = int(rng.integers(2**63))
        defects = ()
        if is_anom[i]:
            twin = render_sample(spec, sample_seed)
            defects = (sample_defect(spec, twin.fg_mask, rng),)
        sample = render_sample(spec, sample_seed, defects, sample_id=sid)
        save_sample(sample, cat_dir / "test" / sid)
        test_labels[sid] = sample.label
        if defects:
            defect_log[sid] = [asdict(d) for d in defects]

    manifest = {
        "format": MANIFEST_FORMAT,
        "category": spec.name,
        "seed": int(seed),
        "image_size": list(spec.image_size),
        "category_spec": spec.to_dict(),
        "sample_seeds": seeds,
        "splits": {
            "train": {"sample_ids": train_ids, "labels": {s: "normal" for s in train_ids}},
            "test": {"sample_ids": test_ids, "labels": test_labels, "defects": defect_log},
        },
    }
    (cat_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return load_manifest(root, spec.name, "train"), load_manifest(root, spec.name, "test")


def load_manifest(root, category: str, split: str) -> DatasetManifest:
    path = Path(root) / category / "manifest.json"
    if not path.is_file():
        raise SampleNotFoundError(f"no dataset manifest at {path}")
    try:
        data = json.loads(path.read_text())
        part = data["splits"][split]
        return DatasetManifest(
            root=Path(root), category=data["category"], split=split,
            sample_ids=list(part["sample_ids"]), seed=int(data["seed"]),
            image_size=tuple(data["image_size"]), labels=dict(part.get("labels", {})),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc


def load_category_spec(root, category: str) -> CategorySpec:
    data = json.loads((Path(root) / category / "manifest.json").read_text())
    return CategorySpec.from_dict(data["category_spec"])


def load_sample(manifest: DatasetManifest, sample_id: str) -> MultimodalSample:
    if sample_id not in manifest.sample_ids:
        raise SampleNotFoundError(f"sample {sample_id!r} not in {manifest.category}/{manifest.split}")
    d = manifest.sample_dir(sample_id)
    if not (d / "rgb.png").is_file() or not (d / "points.bin").is_file():
        raise SampleNotFoundError(f"sample files missing under {d}")
    with Image.open(d / "rgb.png") as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    points, valid = read_points(d / "points.bin")
    try:
        K = np.asarray(json.loads((d / "intrinsics.json").read_text())["K"], dtype=np.float64)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{d / 'intrinsics.json'}: {exc}") from exc
    if K.shape != (3, 3):
        raise FormatError(f"{d / 'intrinsics.json'}: intrinsics must be 3x3")
    fg = _read_mask(d / "fg_mask.png")
    label = manifest.label(sample_id)
    gt = None
    if label == "anomalous":
        gt = _read_mask(d / "gt_mask.png")
    return MultimodalSample(rgb=rgb, points=points, valid=valid, intrinsics=K,
                            fg_mask=fg, gt_mask=gt, label=label, sample_id=sample_id)


# ---------------------------------------------------------------------------
# feature archive
#
#   b"MMFA" u16 version=1 u16 reserved u32 n_records
#   per record:
#     u16 id_len, utf-8 sample_id, u8 modality (0=rgb, 1=point),
#     u32 g_h, u32 g_w, u32 D, float32[g_h*g_w*D] payload (row-major),
#     u8[g_h*g_w] participation mask (0/1)
#
# N_m = g_h * g_w; real-backbone features only need to be pooled to a grid.

_FA_MAGIC = b"MMFA"
_FA_HEADER = struct.Struct("<4sHHI")
_FA_RECORD = struct.Struct("<BIII")


def write_feature_archive(records, path):
    """``records``: iterable of ``(sample_id, FeatureGrid)`` pairs."""
    records = list(records)
    chunks = [_FA_HEADER.pack(_FA_MAGIC, 1, 0, len(records))]
    for sample_id, grid in records:
        sid = sample_id.encode("utf-8")
        g_h, g_w = grid.grid_shape
        chunks.append(struct.pack("<H", len(sid)) + sid)
        chunks.append(_FA_RECORD.pack(MODALITIES.index(grid.modality), g_h, g_w, grid.dim))
        chunks.append(np.ascontiguousarray(grid.features, dtype="<f4").tobytes())
        chunks.append(grid.mask.astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_feature_archive(path) -> list[tuple[str, FeatureGrid]]:
    raw = Path(path).read_bytes()
    try:
        magic, version, _, n = _FA_HEADER.unpack_from(raw)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated archive header") from exc
    if magic != _FA_MAGIC or version != 1:
        raise FormatError(f"{path}: not a feature archive")
    off = _FA_HEADER.size
    out = []
    try:
        for _ in range(n):
            (id_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            sid = raw[off: off + id_len].decode("utf-8")
            off += id_len
            mod, g_h, g_w, dim = _FA_RECORD.unpack_from(raw, off)
            off += _FA_RECORD.size
            n_m = g_h * g_w
            feats = np.frombuffer(raw, dtype="<f4", count=n_m * dim, offset=off).reshape(n_m, dim)
            off += 4 * n_m * dim
            mask = np.frombuffer(raw, dtype=np.uint8, count=n_m, offset=off).astype(bool)
            off += n_m
            out.append((sid, FeatureGrid(MODALITIES[mod], (g_h, g_w), feats.astype(np.float32),
                                         mask=mask, sample_id=sid)))
    except (struct.error, ValueError, IndexError) as exc:
        raise FormatError(f"{path}: corrupted record ({exc})") from exc
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def import_precomputed_features(path) -> dict[str, dict[str, FeatureGrid]]:
    """Load ``{sample_id: {"rgb": grid, "point": grid}}`` from a feature archive."""
    grids: dict[str, dict[str, FeatureGrid]] = {}
    dims: dict[str, tuple] = {}
    for sid, grid in read_feature_archive(path):
        sig = (grid.grid_shape, grid.dim)
        if dims.setdefault(grid.modality, sig) != sig:
            raise FormatError(
                f"{path}: {grid.modality} grid/dim {sig} of {sid!r} differs from {dims[grid.modality]}")
        grids.setdefault(sid, {})[grid.modality] = grid
    for sid, pair in grids.items():
        for modality in MODALITIES:
            if modality not in pair:
                raise FormatError(f"{path}: sample {sid!r} is missing the {modality!r} modality")
        if pair["rgb"].grid_shape != pair["point"].grid_shape:
            raise FormatError(f"{path}: sample {sid!r} has mismatched patch grids")
    return grids
