"""Datasets, the synthetic shape benchmark, splits and point-cloud file I/O."""

from __future__ import annotations

import csv
import math
import os
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, normalize_unit_range, rotate_z, sample_uniform
from .numerics import make_rng

SHAPES = ("sphere", "cube", "cylinder", "cone", "torus", "plane", "helix")
DEFAULT_CLASSES = ("sphere", "cube", "cylinder", "plane")
TRANSFER_CLASSES = ("cone", "torus", "helix")


class FormatError(ValueError):
    """Malformed point-cloud, manifest or checkpoint file."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset


@dataclass
class Dataset:
    clouds: list[PointCloud]
    labels: np.ndarray
    class_names: list[str]
    source: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.clouds) != len(self.labels):
            raise ValueError("clouds and labels are not aligned")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside [0, C)")

    def __len__(self) -> int:
        return len(self.clouds)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> Dataset:
        indices = list(indices)
        return Dataset([self.clouds[i] for i in indices], self.labels[indices], list(self.class_names), self.source)


# synthetic shapes ----------------------------------------------------------
# Each sampler returns n points uniform (by area, or arc length for the helix)
# on a unit-sized analytic surface.

def _sphere(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(n, rng):
    face = rng.integers(6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
    pts = np.empty((n, 3))
    for a in range(3):
        others = [b for b in range(3) if b != a]
        sel = axis == a
        pts[sel, a] = sign[sel]
        pts[np.ix_(sel, others)] = uv[sel]
    return pts


def _disk(n, radius, rng):
    r = radius * np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0.0, 2 * np.pi, size=n)
    return r * np.cos(t), r * np.sin(t)


def _cylinder(n, rng, radius=0.5, half_height=1.0):
    side = 2 * np.pi * radius * 2 * half_height
    cap = np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    pts = np.empty((n, 3))
    s = part == 0
    t = rng.uniform(0.0, 2 * np.pi, size=s.sum())
    pts[s] = np.c_[radius * np.cos(t), radius * np.sin(t), rng.uniform(-half_height, half_height, size=s.sum())]
    for code, z in ((1, -half_height), (2, half_height)):
        m = part == code
        x, y = _disk(m.sum(), radius, rng)
        pts[m] = np.c_[x, y, np.full(m.sum(), z)]
    return pts


def _cone(n, rng, radius=1.0, height=2.0):
    slant = math.hypot(radius, height)
    side, base = np.pi * radius * slant, np.pi * radius ** 2
    on_side = rng.uniform(size=n) < side / (side + base)
    pts = np.empty((n, 3))
    m = int(on_side.sum())
    frac = np.sqrt(rng.uniform(size=m))  # distance from apex, area-uniform
    t = rng.uniform(0.0, 2 * np.pi, size=m)
    pts[on_side] = np.c_[radius * frac * np.cos(t), radius * frac * np.sin(t), height / 2 - frac * height]
    x, y = _disk(n - m, radius, rng)
    pts[~on_side] = np.c_[x, y, np.full(n - m, -height / 2)]
    return pts


def _torus(n, rng, major=0.8, minor=0.3):
    out = np.empty((0, 2))
    while len(out) < n:
        u = rng.uniform(0.0, 2 * np.pi, size=(2 * n, 2))
        keep = rng.uniform(size=2 * n) < (major + minor * np.cos(u[:, 1])) / (major + minor)
        out = np.vstack([out, u[keep]])
    theta, phi = out[:n, 0], out[:n, 1]
    ring = major + minor * np.cos(phi)
    return np.c_[ring * np.cos(theta), ring * np.sin(theta), minor * np.sin(phi)]


def _plane(n, rng):
    return np.c_[rng.uniform(-1.0, 1.0, size=(n, 2)), np.zeros(n)]


def _helix(n, rng, turns=3.0, radius=0.7, half_height=1.0):
    t = rng.uniform(0.0, 1.0, size=n)
    ang = 2 * np.pi * turns * t
    return np.c_[radius * np.cos(ang), radius * np.sin(ang), half_height * (2 * t - 1)]


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "cone": _cone,
             "torus": _torus, "plane": _plane, "helix": _helix}


def sample_shape(name: str, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Noise-free points on the canonical (unscaled, unrotated) surface."""
    try:
        return _SAMPLERS[name](n_points, rng)
    except KeyError:
        raise ValueError(f"unknown shape {name!r}; valid shapes: {', '.join(SHAPES)}") from None


def gen_synthetic(classes=DEFAULT_CLASSES, per_class: int = 200, n_points: int = 512,
                  noise_sigma: float = 0.02, seed: int = 0) -> Dataset:
    """Analytic shapes with random scale in [0.7, 1.3], z-rotation and Gaussian noise.

    Class indices follow the order of ``classes``.
    """
    classes = list(classes)
    bad = [c for c in classes if c not in _SAMPLERS]
    if bad:
        raise ValueError(f"unknown shape(s) {bad}; valid shapes: {', '.join(SHAPES)}")
    if per_class < 1 or n_points < 8:
        raise ValueError("need per_class >= 1 and n_points >= 8")
    clouds, labels = [], []
    for label, name in enumerate(classes):
        rng = make_rng(seed, 10, SHAPES.index(name))
        for i in range(per_class):
            scale = rng.uniform(0.7, 1.3)
            angle = rng.uniform(0.0, 2 * np.pi)
            pts = sample_shape(name, n_points, rng) * scale
            c, s = np.cos(angle), np.sin(angle)
            pts = pts @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
            if noise_sigma > 0:
                pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
            clouds.append(PointCloud(pts, label=label, id=f"{name}_{i:04d}",
                                     meta={"scale": scale, "angle": angle}))
            labels.append(label)
    return Dataset(clouds, np.array(labels), classes, source=f"synthetic:seed={seed}")


def split(dataset: Dataset, train_fraction: float = 0.85, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split: ceil(train_fraction * n_c) samples of each class go to train."""
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must lie in (0, 1]")
    rng = make_rng(seed, 20)
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) == 0:
            continue
        members = members[rng.permutation(len(members))]
        n_train = math.ceil(round(train_fraction * len(members), 9))
        if len(members) == 1:
            warnings.warn(f"class {dataset.class_names[c]!r} has a single sample; it goes to train")
        train_idx.extend(members[:n_train].tolist())
        test_idx.extend(members[n_train:].tolist())
    if not test_idx:
        warnings.warn("split produced an empty test set")
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(test_idx))


# PCF binary ----------------------------------------------------------------

PCF_MAGIC = b"PCF1"
_FLAG_EXTRAS = 1
_FLAG_COLORS = 2


def encode_pcf(cloud: PointCloud) -> bytes:
    flags = 0
    if cloud.extras is not None:
        flags |= _FLAG_EXTRAS
        if cloud.extras_kind == "colors":
            flags |= _FLAG_COLORS
    body = PCF_MAGIC + struct.pack("<II", flags, len(cloud)) + cloud.points.astype("<f4").tobytes()
    if cloud.extras is not None:
        body += cloud.extras.astype("<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_pcf(buf: bytes, path=None, cloud_id: str = "") -> PointCloud:
    if len(buf) < 12:
        raise FormatError(f"truncated header ({len(buf)} bytes)", len(buf), path)
    if buf[:4] != PCF_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0, path)
    flags, n = struct.unpack_from("<II", buf, 4)
    if n < 1:
        raise FormatError("point count must be >= 1", 8, path)
    has_extras = bool(flags & _FLAG_EXTRAS)
    payload = 12 * n * (2 if has_extras else 1)
    expected = 12 + payload + 4
    if len(buf) != expected:
        raise FormatError(f"size mismatch: {n} points declare {expected} bytes, file has {len(buf)}",
                          min(len(buf), expected), path)
    stored = struct.unpack_from("<I", buf, expected - 4)[0]
    if zlib.crc32(buf[:expected - 4]) != stored:
        raise FormatError("CRC32 mismatch", expected - 4, path)
    pts = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=12).reshape(n, 3)
    extras = None
    if has_extras:
        extras = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=12 + 12 * n).reshape(n, 3)
    for block, base in ((pts, 12), (extras, 12 + 12 * n)):
        if block is not None and not np.isfinite(block).all():
            bad = int(np.flatnonzero(~np.isfinite(block.reshape(-1)))[0])
            raise FormatError("non-finite value", base + 4 * bad, path)
    kind = ("colors" if flags & _FLAG_COLORS else "normals") if has_extras else None
    return PointCloud(pts.astype(np.float32), extras, kind, id=cloud_id)


def save_pcf(cloud: PointCloud, path) -> None:
    Path(path).write_bytes(encode_pcf(cloud))


def load_pcf(path) -> PointCloud:
    path = Path(path)
    return decode_pcf(path.read_bytes(), path, cloud_id=path.stem)


def load_xyz(path) -> PointCloud:
    """ASCII ``x y z`` per line; ``#`` starts a comment."""
    rows = []
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) < 3:
                raise FormatError(f"line {lineno}: expected 3 coordinates", path=path)
            try:
                rows.append([float(v) for v in parts[:3]])
            except ValueError:
                raise FormatError(f"line {lineno}: not a number", path=path) from None
    if not rows:
        raise FormatError("no points", path=path)
    pts = np.array(rows)
    if not np.isfinite(pts).all():
        raise FormatError("non-finite coordinate", path=path)
    return PointCloud(pts, id=path.stem)


def load_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".pcf":
        return load_pcf(path)
    return load_xyz(path)


# manifests -----------------------------------------------------------------

@dataclass
class Manifest:
    rows: list[tuple[Path, str]]
    class_index: dict[str, int] = field(default_factory=dict)

    @classmethod
    def read(cls, path) -> Manifest:
        path = Path(path)
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["path", "class"]:
                raise FormatError("manifest header must be 'path,class'", path=path)
            rows = []
            for lineno, row in enumerate(reader, 2):
                if not row:
                    continue
                if len(row) != 2:
                    raise FormatError(f"line {lineno}: expected 2 columns", path=path)
                rows.append(((path.parent / row[0].strip()).resolve(), row[1].strip()))
        if not rows:
            raise FormatError("manifest has no rows", path=path)
        seen = set()
        for p, _ in rows:
            if p in seen:
                raise FormatError(f"duplicate path {p}", path=path)
            seen.add(p)
        names = sorted({c for _, c in rows})
        return cls(rows, {c: i for i, c in enumerate(names)})

    @property
    def class_names(self) -> list[str]:
        return sorted(self.class_index, key=self.class_index.get)


def write_manifest(path, rows) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "class"])
        for p, c in rows:
            writer.writerow([str(p), c])


def load_manifest(path, n_points: int = 2048, seed: int = 0) -> Dataset:
    """Load every listed file, resample to ``n_points`` and normalise to [-1, 1].

    Class indices are the ranks of the sorted class names.
    """
    manifest = Manifest.read(path)
    manifest_dir = Path(path).resolve().parent
    clouds, labels = [], []
    for file, cls_name in manifest.rows:
        if not file.exists():
            raise FileNotFoundError(f"manifest {path} references missing file {file}")
        cloud = load_cloud(file)
        label = manifest.class_index[cls_name]
        # Stream keyed on the file's manifest-relative path, so row order does not matter.
        key = zlib.crc32(os.path.relpath(file, manifest_dir).encode("utf-8"))
        cloud = sample_uniform(cloud, n_points, make_rng(seed, 30, key))
        cloud = normalize_unit_range(cloud)
        clouds.append(PointCloud(cloud.points, cloud.extras, cloud.extras_kind, label, file.stem))
        labels.append(label)
    return Dataset(clouds, np.array(labels), manifest.class_names, source=str(path))


def prepare_cloud(cloud: PointCloud, n_points: int, rng: np.random.Generator | None,
                  angle: float | None = None) -> PointCloud:
    """Training/eval preprocessing: resample (if needed), normalise, optionally rotate about z."""
    if len(cloud) != n_points:
        if rng is None:
            raise ValueError("resampling needs an rng")
        cloud = sample_uniform(cloud, n_points, rng)
    cloud = normalize_unit_range(cloud)
    if angle is not None:
        cloud = rotate_z(cloud, angle)
    return cloud


# separability oracle ---------------------------------------------------------

def covariance_signature(cloud: PointCloud) -> np.ndarray:
    """Scale-invariant shape descriptor of a normalised cloud.

    Sorted eigenvalues of the covariance of the coordinates followed by those of
    the covariance of the squared coordinates (6 values).
    """
    p = normalize_unit_range(cloud).points.astype(np.float64)
    p -= p.mean(axis=0)
    first = np.linalg.eigvalsh(np.cov(p.T))
    second = np.linalg.eigvalsh(np.cov((p * p).T))
    return np.concatenate([np.sort(first), np.sort(second)])


def nearest_centroid_oa(train: Dataset, test: Dataset) -> float:
    """OA (%) of a nearest-centroid classifier on :func:`covariance_signature`."""
    xtr = np.array([covariance_signature(c) for c in train.clouds])
    xte = np.array([covariance_signature(c) for c in test.clouds])
    centroids = np.array([xtr[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    d2 = ((xte[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return 100.0 * float(np.mean(np.argmin(d2, axis=1) == test.labels))
