"""On-disk formats, the synthetic concept-annotated dataset, heatmap writers.

Byte-level contracts (also documented in the README):

* Tensor file: magic "PSEKT1\\n\\0" (8 bytes), u8 ndim, ndim little-endian u32
  dims, payload of little-endian float32 values in row-major order.
* Model file: magic "PSEKM1\\n\\0", u32 tensor count, then per tensor a u16
  name length, the UTF-8 name, and an embedded tensor file; a trailing u32
  CRC32 (IEEE) of all preceding bytes closes the file.
* Dataset directory: images/labels/masks/mask_concepts tensor files plus
  catalogue.json.
* Heatmaps: binary PGM (P5) min-max scaled to 0..255, or binary PPM (P6)
  blending a base image 50/50 with the promotion-suppression color code.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"PSEKT1\n\x00"
MODEL_MAGIC = b"PSEKM1\n\x00"

# pixel category codes consumed by the PPM overlay writer
PSR_SUPPRESSION = 0   # rendered white
PSR_PROMOTION = 1     # rendered black
PSR_BALANCED = 2      # rendered gray
PSR_HIDDEN = 3        # base image shown unblended
_PSR_COLORS = {PSR_SUPPRESSION: 255, PSR_PROMOTION: 0, PSR_BALANCED: 128}


class FormatError(ValueError):
    """Base class for file-format violations."""


class MagicError(FormatError):
    pass


class CrcError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


# --- tensor files -------------------------------------------------------------

def tensor_to_bytes(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    if a.ndim > 255:
        raise ValueError("tensor rank exceeds format limit of 255")
    header = TENSOR_MAGIC + struct.pack("<B", a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0):
    """Parse one embedded tensor; returns (array, next_offset)."""
    if len(buf) - offset < len(TENSOR_MAGIC) + 1:
        raise TruncatedError("truncated header")
    if buf[offset:offset + 8] != TENSOR_MAGIC:
        raise MagicError(f"bad tensor magic {buf[offset:offset + 8]!r}")
    ndim = buf[offset + 8]
    pos = offset + 9
    if len(buf) - pos < 4 * ndim:
        raise TruncatedError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    nbytes = 4 * count
    if len(buf) - pos < nbytes:
        raise TruncatedError("truncated payload")
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype="<f4").reshape(dims).copy()
    return arr, pos + nbytes


def save_tensor(arr: np.ndarray, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor payload")
    return arr


# --- model files ----------------------------------------------------------------

def save_model(model, path) -> None:
    """Serialize named weights in sorted-name order, CRC32-sealed."""
    names = sorted(model.weights)
    body = MODEL_MAGIC + struct.pack("<I", len(names))
    for name in names:
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded)) + encoded
        body += tensor_to_bytes(model.weights[name])
    body += struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(body)


def load_model(path):
    from .micronet import MicroCnn

    buf = Path(path).read_bytes()
    if len(buf) < len(MODEL_MAGIC) + 8:
        raise TruncatedError("truncated header")
    if buf[:8] != MODEL_MAGIC:
        raise MagicError(f"bad model magic {buf[:8]!r}")
    stored_crc = struct.unpack("<I", buf[-4:])[0]
    actual_crc = zlib.crc32(buf[:-4])
    if stored_crc != actual_crc:
        raise CrcError(f"CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")
    count = struct.unpack_from("<I", buf, 8)[0]
    pos = 12
    weights = {}
    for _ in range(count):
        if len(buf) - 4 - pos < 2:
            raise TruncatedError("truncated record header")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) - 4 - pos < name_len:
            raise TruncatedError("truncated record name")
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if name in weights:
            raise FormatError(f"duplicate tensor name {name!r}")
        weights[name], pos = tensor_from_bytes(buf, pos)
    if pos != len(buf) - 4:
        raise FormatError(f"{len(buf) - 4 - pos} trailing bytes before CRC")
    return MicroCnn(weights)


# --- synthetic concept dataset ---------------------------------------------------

SHAPE_NAMES = ("circle", "square", "triangle", "cross", "ring", "bar")
COLOR_NAMES = ("red", "green", "blue", "yellow")
TEXTURE_NAMES = ("stripes", "checker", "speckle")
_COLOR_VALUES = {
    "red": (0.88, 0.12, 0.12),
    "green": (0.12, 0.80, 0.18),
    "blue": (0.15, 0.22, 0.88),
    "yellow": (0.90, 0.85, 0.12),
}
IMAGE_SIZE = 32


def concept_catalogue() -> dict[int, tuple[str, str]]:
    """Full catalogue: ids 0-5 objects, 6-9 colors, 10-12 textures."""
    cat = {i: (name, "object") for i, name in enumerate(SHAPE_NAMES)}
    cat.update({6 + i: (name, "color") for i, name in enumerate(COLOR_NAMES)})
    cat.update({10 + i: (name, "texture") for i, name in enumerate(TEXTURE_NAMES)})
    return cat


@dataclass
class ConceptDataset:
    """Images with per-pixel concept annotations (a desk-scale Broden stand-in).

    masks[i] stacks the per-image object, color and texture masks whose
    concept ids are mask_concepts[i].
    """

    images: np.ndarray          # (N, 3, 32, 32) float32 in [0, 1]
    labels: np.ndarray          # (N,) int
    masks: np.ndarray           # (N, 3, 32, 32) float32 {0, 1}
    mask_concepts: np.ndarray   # (N, 3) int concept ids
    catalogue: dict[int, tuple[str, str]]

    def __len__(self):
        return self.images.shape[0]

    def concept_masks(self, i: int) -> dict[int, np.ndarray]:
        """Per-image map concept-id -> binary 32x32 mask."""
        return {int(cid): self.masks[i, j] for j, cid in enumerate(self.mask_concepts[i])}

    def concept_mask_for(self, i: int, concept_id: int) -> np.ndarray:
        """Annotation mask of a concept for image i (all-zero when absent)."""
        for j, cid in enumerate(self.mask_concepts[i]):
            if int(cid) == concept_id:
                return self.masks[i, j]
        return np.zeros((IMAGE_SIZE, IMAGE_SIZE), np.float32)


def _shape_mask(rng: np.random.Generator, shape_name: str) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    if shape_name == "circle":
        r = int(rng.integers(7, 11))
        cy, cx = rng.integers(r + 1, IMAGE_SIZE - r - 1, 2)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif shape_name == "square":
        a = int(rng.integers(6, 9))
        cy, cx = rng.integers(a + 1, IMAGE_SIZE - a - 1, 2)
        mask = (np.abs(yy - cy) <= a) & (np.abs(xx - cx) <= a)
    elif shape_name == "triangle":
        a = int(rng.integers(7, 11))
        cy, cx = rng.integers(a + 1, IMAGE_SIZE - a - 1, 2)
        mask = (yy >= cy - a) & (yy <= cy + a) & (np.abs(xx - cx) * 2 <= (yy - (cy - a)))
    elif shape_name == "cross":
        a = int(rng.integers(8, 12))
        t = int(rng.integers(2, 4))
        cy, cx = rng.integers(a + 1, IMAGE_SIZE - a - 1, 2)
        mask = ((np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= a)) | \
               ((np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= a))
    elif shape_name == "ring":
        r = int(rng.integers(8, 12))
        cy, cx = rng.integers(r + 1, IMAGE_SIZE - r - 1, 2)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = ((r - 4) ** 2 <= d2) & (d2 <= r * r)
    elif shape_name == "bar":
        a = int(rng.integers(10, 14))
        t = int(rng.integers(3, 5))
        cy, cx = rng.integers(a + 1, IMAGE_SIZE - a - 1, 2)
        if rng.integers(0, 2) == 0:
            mask = (np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= a)
        else:
            mask = (np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= a)
    else:
        raise ValueError(f"unknown shape {shape_name!r}")
    return mask


def _texture_background(rng: np.random.Generator, texture_name: str) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    lo, hi = 0.36, 0.50
    if texture_name == "stripes":
        pattern = (yy // 2) % 2
    elif texture_name == "checker":
        pattern = (yy // 4 + xx // 4) % 2
    elif texture_name == "speckle":
        pattern = (rng.random((IMAGE_SIZE, IMAGE_SIZE)) < 0.5).astype(np.int64)
    else:
        raise ValueError(f"unknown texture {texture_name!r}")
    field = np.where(pattern == 0, lo, hi)
    shade = float(rng.uniform(-0.05, 0.05))
    return np.repeat((field + shade)[None], 3, axis=0)


def generate_shapes(n: int, seed: int, num_classes: int = 6) -> ConceptDataset:
    """One dominant shape per image, in one of 4 colors, on a textured
    background. Class counts are stratified, so histograms stay within one of
    uniform; everything is deterministic given the seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 2 <= num_classes <= len(SHAPE_NAMES):
        raise ValueError(f"unsupported class count {num_classes} (must be 2..6)")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    images = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32)
    masks = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32)
    mask_concepts = np.empty((n, 3), np.int64)
    for i, label in enumerate(labels):
        color_idx = int(rng.integers(0, len(COLOR_NAMES)))
        texture_idx = int(rng.integers(0, len(TEXTURE_NAMES)))
        img = _texture_background(rng, TEXTURE_NAMES[texture_idx])
        shape = _shape_mask(rng, SHAPE_NAMES[label])
        color = np.asarray(_COLOR_VALUES[COLOR_NAMES[color_idx]])
        img = np.where(shape[None], color[:, None, None], img)
        img = img + rng.uniform(-0.03, 0.03, img.shape)
        images[i] = np.clip(img, 0.0, 1.0).astype(np.float32)
        shape_f = shape.astype(np.float32)
        masks[i, 0] = shape_f
        masks[i, 1] = shape_f
        masks[i, 2] = 1.0 - shape_f
        mask_concepts[i] = (label, 6 + color_idx, 10 + texture_idx)
    return ConceptDataset(images, np.asarray(labels, np.int64), masks,
                          mask_concepts, concept_catalogue())


def save_dataset(ds: ConceptDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(ds.images, directory / "images.tensor")
    save_tensor(ds.labels.astype(np.float32), directory / "labels.tensor")
    save_tensor(ds.masks, directory / "masks.tensor")
    save_tensor(ds.mask_concepts.astype(np.float32), directory / "mask_concepts.tensor")
    catalogue = {str(k): list(v) for k, v in sorted(ds.catalogue.items())}
    (directory / "catalogue.json").write_text(json.dumps(catalogue, indent=1, sort_keys=True))


def load_dataset(directory) -> ConceptDataset:
    directory = Path(directory)
    images = load_tensor(directory / "images.tensor")
    labels = load_tensor(directory / "labels.tensor").astype(np.int64)
    masks = load_tensor(directory / "masks.tensor")
    mask_concepts = load_tensor(directory / "mask_concepts.tensor").astype(np.int64)
    raw = json.loads((directory / "catalogue.json").read_text())
    catalogue = {int(k): (v[0], v[1]) for k, v in raw.items()}
    return ConceptDataset(images, labels, masks, mask_concepts, catalogue)


# --- heatmap writers ---------------------------------------------------------------

def heatmap_bytes(values: np.ndarray) -> bytes:
    """Binary PGM (P5), min-max scaled to 0..255; constant fields become 128."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"heatmap values must be 2-D, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError("heatmap values must be finite")
    h, w = v.shape
    vmin, vmax = v.min(), v.max()
    if vmax == vmin:
        body = np.full((h, w), 128, np.uint8)
    else:
        body = np.clip(np.rint((v - vmin) * (255.0 / (vmax - vmin))), 0, 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + body.tobytes()


def overlay_bytes(categories: np.ndarray, base_image: np.ndarray) -> bytes:
    """Binary PPM (P6): base image averaged with the PSR color per pixel.

    categories holds PSR_* codes; PSR_HIDDEN pixels show the base unblended.
    """
    cats = np.asarray(categories)
    if cats.ndim != 2:
        raise ValueError(f"category map must be 2-D, got shape {cats.shape}")
    base = np.asarray(base_image, dtype=np.float64)
    if base.shape != (3,) + cats.shape:
        raise ValueError(f"base image shape {base.shape} does not cover {cats.shape}")
    known = np.isin(cats, (PSR_SUPPRESSION, PSR_PROMOTION, PSR_BALANCED, PSR_HIDDEN))
    if not known.all():
        raise ValueError("category map contains unknown codes")
    base_u8 = np.clip(np.rint(base * 255.0), 0, 255).astype(np.int64)
    color = np.zeros_like(cats, dtype=np.int64)
    for code, value in _PSR_COLORS.items():
        color[cats == code] = value
    blended = (base_u8 + color[None]) // 2
    out = np.where(cats[None] == PSR_HIDDEN, base_u8, blended).astype(np.uint8)
    h, w = cats.shape
    return b"P6\n%d %d\n255\n" % (w, h) + out.transpose(1, 2, 0).tobytes()


def write_heatmap(values: np.ndarray, path, mode: str = "pgm", base_image=None) -> None:
    if mode == "pgm":
        data = heatmap_bytes(values)
    elif mode == "overlay_ppm":
        if base_image is None:
            raise ValueError("overlay_ppm mode requires base_image")
        data = overlay_bytes(values, base_image)
    else:
        raise ValueError(f"unknown heatmap mode {mode!r}")
    Path(path).write_bytes(data)
