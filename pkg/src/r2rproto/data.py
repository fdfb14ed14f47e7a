"""Dataset ingestion (CSV manifest + PGM/PPM) and the synthetic shape benchmark."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, FormatError, IngestionError, ParseError

NIH_CLASSES = (
    "Atelectasis", "Cardiomegaly", "Effusion", "Infiltration", "Mass", "Nodule", "Pneumonia",
    "Pneumothorax", "Consolidation", "Edema", "Emphysema", "Fibrosis", "Pleural_Thickening", "Hernia",
)
SYNTHETIC_CLASSES = ("disc", "square")


@dataclass
class Sample:
    image: np.ndarray  # [c, h, w] in [0, 1]
    labels: np.ndarray  # [n_classes] of 0/1
    gt_region: dict[int, np.ndarray] = field(default_factory=dict)  # class -> bool [h, w]

    def union_region(self) -> np.ndarray | None:
        if not self.gt_region:
            return None
        return np.logical_or.reduce(list(self.gt_region.values()))


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, np.ndarray]]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.entries)

    def load(self) -> list[Sample]:
        samples = []
        for fname, labels in self.entries:
            img = read_image(self.root / fname)
            regions = {}
            for c in np.flatnonzero(labels):
                rpath = self.root / "regions" / f"{Path(fname).stem}.{self.class_names[c]}.pgm"
                if rpath.exists():
                    regions[int(c)] = read_image(rpath)[0] > 0.5
            samples.append(Sample(img, labels.astype(np.float64), regions))
        return samples


# ---------------------------------------------------------------------------
# Netpbm codecs


def _read_netpbm(path, magic: bytes) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if raw[:2] != magic:
        raise FormatError(f"{path}: bad magic {raw[:2]!r}, expected {magic!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed header at byte {pos}")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte before the raster
    w, h, maxval = fields
    if w < 1 or h < 1 or not 0 < maxval <= 65535:
        raise FormatError(f"{path}: invalid header width={w} height={h} maxval={maxval}")
    chans = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * chans * dtype.itemsize
    payload = raw[pos : pos + need]
    if len(payload) < need:
        raise FormatError(f"{path}: truncated payload, {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w, chans)
    return arr.transpose(2, 0, 1), maxval


def read_image_pgm(path) -> np.ndarray:
    """Binary PGM (P5) -> float64 ``[1, h, w]`` scaled to [0, 1]."""
    arr, maxval = _read_netpbm(path, b"P5")
    return arr.astype(np.float64) / maxval


def read_image_ppm(path) -> np.ndarray:
    """Binary PPM (P6) -> float64 ``[3, h, w]`` scaled to [0, 1]."""
    arr, maxval = _read_netpbm(path, b"P6")
    return arr.astype(np.float64) / maxval


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P6":
        return read_image_ppm(path)
    return read_image_pgm(path)


def _to_bytes(img: np.ndarray, maxval: int) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * maxval), 0, maxval)


def write_image_pgm(path, img: np.ndarray, maxval: int = 255) -> None:
    """Write ``[h, w]`` or ``[1, h, w]`` values in [0, 1] as binary PGM."""
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    body = _to_bytes(img, maxval).astype(dtype).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + body)


def write_image_ppm(path, rgb: np.ndarray) -> None:
    """Write ``[h, w, 3]`` uint8 (or [0,1] float) RGB as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = _to_bytes(rgb, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb).tobytes())


# ---------------------------------------------------------------------------
# CSV manifest


def load_manifest(csv_path) -> DatasetManifest:
    """Parse ``image,<class_1>,...,<class_k>``; image paths are relative to the CSV."""
    csv_path = Path(csv_path)
    root = csv_path.parent
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0].strip() != "image":
        raise ParseError(f"{csv_path}: header must start with 'image'")
    classes = [c.strip() for c in rows[0][1:]]
    if not classes:
        raise ParseError(f"{csv_path}: header names no classes")
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(classes) + 1:
            raise ParseError(
                f"{csv_path}:{lineno}: {len(row) - 1} label cells but {len(classes)} classes in header"
            )
        cells = [c.strip() for c in row[1:]]
        bad = [c for c in cells if c not in ("0", "1")]
        if bad:
            raise ParseError(f"{csv_path}:{lineno}: non-binary label cell {bad[0]!r}")
        fname = row[0].strip()
        if not (root / fname).is_file():
            raise IngestionError(f"{csv_path}:{lineno}: image file not found: {fname}")
        entries.append((fname, np.array([int(c) for c in cells], dtype=np.int64)))
    return DatasetManifest(root=root, entries=entries, class_names=classes)


def export_dataset(samples: Sequence[Sample], out_dir, class_names: Sequence[str] = SYNTHETIC_CLASSES) -> Path:
    """Write samples as ``images/*.pgm`` + ``manifest.csv`` (+ ``regions/`` masks)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "regions").mkdir(exist_ok=True)
    width = max(5, len(str(len(samples))))
    with open(out / "manifest.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["image", *class_names])
        for i, s in enumerate(samples):
            stem = f"{i:0{width}d}"
            write_image_pgm(out / "images" / f"{stem}.pgm", s.image)
            for c, reg in s.gt_region.items():
                write_image_pgm(out / "regions" / f"{stem}.{class_names[c]}.pgm", reg.astype(np.float64))
            wr.writerow([f"images/{stem}.pgm", *(int(v) for v in s.labels)])
    return out / "manifest.csv"


# ---------------------------------------------------------------------------
# synthetic benchmark

NOISE_AMPLITUDE = 0.2
SHAPE_BRIGHTNESS = 0.8
# shape extents as fractions of the canvas side
DISC_RADIUS = (0.15, 0.21)
SQUARE_SIDE = (0.28, 0.38)


def _disc(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r


def _square(size: int, top: int, left: int, side: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    m[top : top + side, left : left + side] = True
    return m


def _place(rng: np.random.Generator, size: int, cls: int, taken: np.ndarray) -> np.ndarray:
    # shape extents scale with the canvas; rejection-sample a spot clear of other shapes
    for _ in range(50):
        if cls == 0:
            r = rng.uniform(*DISC_RADIUS) * size
            cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
            fp = _disc(size, cy, cx, r)
        else:
            side = int(rng.integers(round(SQUARE_SIDE[0] * size), round(SQUARE_SIDE[1] * size) + 1))
            top, left = rng.integers(1, size - side, size=2)
            fp = _square(size, int(top), int(left), side)
        if not (fp & taken).any():
            return fp
    return fp


def generate_synthetic(n: int, size: int = 64, seed: int = 0) -> list[Sample]:
    """Noisy canvases holding an optional disc (class 0) and/or square (class 1).

    Each class is present independently with probability 0.5; ``gt_region``
    holds the exact footprint of every present shape.
    """
    if n < 1 or size < 16:
        raise ContractError(f"generate_synthetic needs n >= 1 and size >= 16, got n={n}, size={size}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        img = rng.uniform(0.0, NOISE_AMPLITUDE, size=(size, size))
        present = rng.random(2) < 0.5
        taken = np.zeros((size, size), dtype=bool)
        regions = {}
        for cls in np.flatnonzero(present):
            fp = _place(rng, size, int(cls), taken)
            taken |= fp
            regions[int(cls)] = fp
            img[fp] = SHAPE_BRIGHTNESS
        out.append(Sample(img[None], present.astype(np.float64), regions))
    return out


# ---------------------------------------------------------------------------
# batching


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])


def batch_iterator(samples: Sequence, batch_size: int, shuffle_seed: int | None) -> Iterator[list]:
    """Yield batches in a seeded permutation (identity when the seed is None); last batch may be short."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    if len(samples) == 0:
        raise ContractError("cannot batch an empty dataset")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start : start + batch_size]]


def split_train_val(samples: Sequence, seed: int, val_fraction: float = 0.1) -> tuple[list, list]:
    """Deterministic seeded split; validation gets ``ceil`` of the fraction (at least one sample if n > 1)."""
    n = len(samples)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = min(n - 1, max(1, int(np.ceil(val_fraction * n)))) if n > 1 else 0
    val = [samples[i] for i in sorted(perm[:n_val])]
    train = [samples[i] for i in sorted(perm[n_val:])]
    return train, val


def threads_from_env() -> int | None:
    v = os.environ.get("R2R_THREADS")
    return int(v) if v and v.isdigit() and int(v) > 0 else None
