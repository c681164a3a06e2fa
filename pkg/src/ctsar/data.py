"""Image decoding, resizing, dataset manifests and synthetic data.

Datasets live on disk as ``root/score{1..4}/*.{ppm,png}``; the directory name
carries the hyperkeratosis score and the internal label is ``score - 1``.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

IMAGE_SIZE = 224
CLASS_DIRS = ("score1", "score2", "score3", "score4")
EXTENSIONS = (".ppm", ".png")


class DatasetError(Exception):
    """Missing directories, unreadable files and similar data problems."""


class ImageDecodeError(DatasetError):
    pass


class UnsupportedFormatError(ImageDecodeError):
    pass


# --- portable pixmap -------------------------------------------------------
def _ppm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    tokens, pos, n = [], 2, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageDecodeError("malformed PPM header")
        tokens.append(int(buf[start:pos]))
    return tokens, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode binary (P6) or ASCII (P3) pixmaps to an ``[H, W, 3]`` uint8 array."""
    magic = buf[:2]
    if magic not in (b"P6", b"P3"):
        raise UnsupportedFormatError(f"not a PPM file (magic {magic!r})")
    (w, h, maxval), pos = _ppm_tokens(buf, 3)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ImageDecodeError(f"invalid PPM dimensions {w}x{h} maxval {maxval}")
    n = w * h * 3
    if magic == b"P6":
        pos += 1  # single whitespace byte before the raster
        dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
        raw = buf[pos : pos + n * dtype.itemsize]
        if len(raw) < n * dtype.itemsize:
            raise ImageDecodeError("truncated PPM raster")
        arr = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    else:
        vals = buf[pos:].split()
        if len(vals) < n:
            raise ImageDecodeError("truncated PPM raster")
        arr = np.array([int(v) for v in vals[:n]], dtype=np.float64)
    if arr.max(initial=0) > maxval:
        raise ImageDecodeError("PPM sample exceeds maxval")
    if maxval != 255:
        arr = np.round(arr * 255.0 / maxval)
    return arr.reshape(h, w, 3).astype(np.uint8)


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.reshape(h, w, 3).tobytes()


def write_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(pixels))


def decode_png(buf: bytes) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(buf)) as im:
            if im.format != "PNG":
                raise UnsupportedFormatError(f"expected PNG, found {im.format}")
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"corrupt PNG: {exc}") from exc


PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def decode_image(path) -> np.ndarray:
    """Decode a PPM or PNG file to ``[H, W, 3]`` uint8 RGB."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ImageDecodeError(f"cannot read {path}: {exc}") from exc
    if buf[:2] in (b"P6", b"P3"):
        return decode_ppm(buf)
    if buf[:8] == PNG_MAGIC:
        return decode_png(buf)
    raise UnsupportedFormatError(f"{path}: unsupported image format")


# --- resizing --------------------------------------------------------------
def _bilinear_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source indices and weights for half-pixel-centred sampling."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of ``[H, W, C]`` with edge clamping and no antialiasing."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    r0, r1, fr = _bilinear_taps(h, height)
    c0, c1, fc = _bilinear_taps(w, width)
    top = img[r0] * (1 - fr)[:, None, None] + img[r1] * fr[:, None, None]
    return top[:, c0] * (1 - fc)[None, :, None] + top[:, c1] * fc[None, :, None]


def decode_and_resize(path, size: int = IMAGE_SIZE) -> np.ndarray:
    """Decode ``path`` and return a ``[3, size, size]`` float32 array in ``[0, 1]``."""
    rgb = decode_image(path)
    out = resize_bilinear(rgb, size, size) / 255.0
    return np.clip(out, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


# --- manifests ---------------------------------------------------------------
@dataclass
class ManifestEntry:
    path: str
    label: int  # 0-based; score = label + 1
    split: str = "train"

    @property
    def score(self) -> int:
        return self.label + 1


@dataclass
class DatasetManifest:
    root: str
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def counts(self) -> list[int]:
        c = [0] * len(CLASS_DIRS)
        for e in self.entries:
            c[e.label] += 1
        return c

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["path", "score", "split"])
        for e in sorted(self.entries, key=lambda e: e.path):
            writer.writerow([e.path, e.score, e.split])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _probe(path: Path) -> None:
    """Cheap validity check used when building a manifest."""
    with path.open("rb") as fh:
        head = fh.read(64)
    if head[:2] in (b"P6", b"P3"):
        decode_ppm(path.read_bytes())
    elif head[:8] == PNG_MAGIC:
        from PIL import Image

        try:
            with Image.open(path) as im:
                im.verify()
        except Exception as exc:
            raise ImageDecodeError(f"corrupt PNG: {exc}") from exc
    else:
        raise UnsupportedFormatError(f"{path}: unsupported image format")


def load_dataset(root) -> DatasetManifest:
    """List every decodable image under ``root/score1..score4``."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    missing = [str(root / name) for name in CLASS_DIRS if not (root / name).is_dir()]
    if missing:
        raise DatasetError(f"missing class directory: {', '.join(missing)}")
    manifest = DatasetManifest(str(root))
    for label, name in enumerate(CLASS_DIRS):
        d = root / name
        found = 0
        for path in sorted(d.iterdir()):
            if not path.is_file() or path.suffix.lower() not in EXTENSIONS:
                continue
            try:
                _probe(path)
            except ImageDecodeError as exc:
                warnings.warn(f"skipping undecodable image {path}: {exc}")
                continue
            manifest.entries.append(ManifestEntry(str(path), label))
            found += 1
        if found == 0:
            warnings.warn(f"class directory {d} contains no images")
    manifest.entries.sort(key=lambda e: e.path)
    return manifest


def val_count(n: int, val_fraction: float) -> int:
    """Per-class validation size: round half up, at least 1 when n >= 2, never all of n."""
    if n < 2:
        return 0
    k = int((Decimal(n) * Decimal(str(val_fraction))).to_integral_value(rounding=ROUND_HALF_UP))
    return min(max(k, 1), n - 1)


def stratified_split(manifest: DatasetManifest, val_fraction: float = 0.15, seed: int = 0) -> DatasetManifest:
    """Assign each entry to ``train`` or ``val`` class by class with a seeded shuffle."""
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[ManifestEntry]] = {}
    for e in sorted(manifest.entries, key=lambda e: e.path):
        by_class.setdefault(e.label, []).append(e)
    out = []
    for label in sorted(by_class):
        members = by_class[label]
        k = val_count(len(members), val_fraction)
        chosen = set(rng.permutation(len(members))[:k].tolist())
        for i, e in enumerate(members):
            out.append(ManifestEntry(e.path, e.label, "val" if i in chosen else "train"))
    out.sort(key=lambda e: e.path)
    return DatasetManifest(manifest.root, out)


def load_images(entries: Sequence[ManifestEntry], size: int = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Decode entries into ``([N, 3, size, size] float32, [N] labels)``."""
    images = np.empty((len(entries), 3, size, size), dtype=np.float32)
    for i, e in enumerate(entries):
        images[i] = decode_and_resize(e.path, size)
    return images, np.array([e.label for e in entries], dtype=np.int64)


# --- synthetic data ----------------------------------------------------------
CLASS_TINTS = np.array([[0.85, 0.35, 0.30], [0.30, 0.75, 0.35], [0.30, 0.40, 0.85], [0.80, 0.75, 0.25]])


def synthetic_image(label: int, rng: np.random.Generator, size: int = 64, noise: float = 0.06) -> np.ndarray:
    """One ``[size, size, 3]`` uint8 image: ``label + 1`` concentric rings in a class tint, plus noise."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = size / 2 + rng.uniform(-1.5, 1.5, size=2)
    r = np.hypot(yy - cy, xx - cx) / (size / 2)
    rings = label + 1
    # rings of equal width inside the unit disc
    phase = r * rings * 2
    band = ((np.floor(phase) % 2) == 0) & (r < 1.0)
    base = np.where(band[..., None], CLASS_TINTS[label], 0.15)
    img = base + rng.normal(0.0, noise, size=base.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(n_per_class: int, seed: int, out_dir, size: int = 64) -> Path:
    """Write ``out_dir/score{1..4}/img_XXXX.ppm`` with ``n_per_class`` images per class."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    try:
        for label, name in enumerate(CLASS_DIRS):
            d = out / name
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n_per_class):
                write_ppm(d / f"img_{i:04d}.ppm", synthetic_image(label, rng, size))
    except OSError as exc:
        raise DatasetError(f"cannot write synthetic dataset to {out}: {exc}") from exc
    return out
