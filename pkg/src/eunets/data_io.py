"""Synthetic segmentation data, PGM/CSV map files, checkpoints and k-fold plans."""

import csv
import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import ContractViolation, FormatError
from .pixelmap import PixelMap

SHAPE_KINDS = ("disk", "ellipse", "blob")


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    image_size: int = 64
    sample_count: int = 200
    shape_kinds: tuple = SHAPE_KINDS
    noise_std: float = 0.15
    boundary_blur_px: float = 1.5
    seed: int = 0
    background: float = 0.2
    foreground: float = 0.8

    def __post_init__(self):
        self.shape_kinds = tuple(self.shape_kinds)
        bad = set(self.shape_kinds) - set(SHAPE_KINDS)
        if bad or not self.shape_kinds:
            raise ContractViolation(f"shape kinds must be a non-empty subset of {SHAPE_KINDS}")
        if self.noise_std < 0 or self.boundary_blur_px < 0:
            raise ContractViolation("noise_std and boundary_blur_px must be >= 0")
        if self.image_size < 8 or self.sample_count < 0:
            raise ContractViolation("image_size must be >= 8 and sample_count >= 0")


@dataclass
class Shape:
    """Geometry of one foreground shape, in pixel-index coordinates."""

    kind: str
    cy: float
    cx: float
    ry: float
    rx: float = None
    angle: float = 0.0
    lobes: tuple = ()

    def inside(self, rows, cols):
        dy, dx = rows - self.cy, cols - self.cx
        if self.kind == "disk":
            return dy * dy + dx * dx <= self.ry * self.ry
        ca, sa = np.cos(self.angle), np.sin(self.angle)
        u = ca * dx + sa * dy
        v = -sa * dx + ca * dy
        rx = self.rx if self.rx is not None else self.ry
        if self.kind == "ellipse":
            return (u / rx) ** 2 + (v / self.ry) ** 2 <= 1.0
        # blob: radius modulated by a few angular harmonics
        theta = np.arctan2(v, u)
        radius = np.full(theta.shape, self.ry)
        for order, amp, phase in self.lobes:
            radius = radius + amp * np.cos(order * theta + phase)
        return u * u + v * v <= radius * radius


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    id: int
    shapes: list = field(default_factory=list, repr=False)


def rasterize(shapes, size):
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for shape in shapes:
        mask |= shape.inside(rows, cols)
    return mask


def render_sample(shapes, cfg, rng=None, sample_id=0):
    """Draw ``shapes`` as a noisy, boundary-blurred image; the mask is the crisp geometry."""
    mask = rasterize(shapes, cfg.image_size)
    clean = np.where(mask, cfg.foreground, cfg.background)
    if cfg.boundary_blur_px > 0:
        clean = ndimage.gaussian_filter(clean, cfg.boundary_blur_px, mode="nearest")
    if cfg.noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        clean = clean + rng.normal(0.0, cfg.noise_std, size=clean.shape)
    image = np.clip(clean, 0.0, 1.0)
    return Sample(image[None], mask.astype(np.int64), sample_id, list(shapes))


def _random_shape(kind, size, rng):
    r = rng.uniform(0.08, 0.2) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    if kind == "disk":
        return Shape("disk", cy, cx, r)
    if kind == "ellipse":
        return Shape("ellipse", cy, cx, r, r * rng.uniform(0.5, 1.0), rng.uniform(0, np.pi))
    lobes = tuple((int(o), float(rng.uniform(0.05, 0.2) * r), float(rng.uniform(0, 2 * np.pi))) for o in rng.choice([2, 3, 4, 5], size=2, replace=False))
    return Shape("blob", cy, cx, r, None, rng.uniform(0, np.pi), lobes)


def generate_synthetic(cfg):
    """``cfg.sample_count`` samples of 1-3 bright shapes on a dark background; pure in ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    samples = []
    for i in range(cfg.sample_count):
        count = int(rng.integers(1, 4))
        kinds = rng.choice(len(cfg.shape_kinds), size=count)
        shapes = [_random_shape(cfg.shape_kinds[k], cfg.image_size, rng) for k in kinds]
        samples.append(render_sample(shapes, cfg, rng, i))
    return samples


def ambiguous_band(mask, width):
    """Pixels within ``width`` pixels of the mask boundary, on either side."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any() or mask.all():
        return np.zeros(mask.shape, dtype=bool)
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    dist = np.where(mask, inside, outside)
    return dist <= width


def stack_samples(samples):
    images = np.stack([np.asarray(s.image, dtype=np.float64) for s in samples])
    masks = np.stack([np.asarray(s.mask, dtype=np.int64) for s in samples])
    return images, masks


# ---------------------------------------------------------------------------
# PGM (binary P5, maxval 255)
# ---------------------------------------------------------------------------


def encode_pgm(values):
    v = np.asarray(values.values if isinstance(values, PixelMap) else values, dtype=np.float64)
    if v.ndim != 2:
        raise ContractViolation("PGM maps must be 2-d")
    if v.size and (v.min() < 0.0 or v.max() > 1.0):
        raise ContractViolation("PGM values must lie in [0, 1]")
    # round half up: 0.5 -> 127.5 -> 128
    q = np.floor(v * 255.0 + 0.5).astype(np.uint8)
    h, w = v.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def write_pgm(pixel_map, path):
    data = encode_pgm(pixel_map)
    with open(path, "wb") as fh:
        fh.write(data)


def _pgm_token(buf, pos):
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of PGM header", start)
    return buf[start:pos], start, pos


def decode_pgm(buf, kind="image"):
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM (missing P5 magic)", 0)
    pos = 2
    fields = []
    for label in ("width", "height", "maxval"):
        tok, start, pos = _pgm_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"invalid PGM {label} {tok!r}", start)
        fields.append(int(tok))
    w, h, maxval = fields
    if not 0 < maxval < 256:
        raise FormatError(f"unsupported PGM maxval {maxval}", pos)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header", pos)
    pos += 1
    need = w * h
    if len(buf) - pos < need:
        raise FormatError(f"PGM raster truncated: need {need} bytes, have {len(buf) - pos}", len(buf))
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w)
    return PixelMap(raster.astype(np.float64) / maxval, kind)


def read_pgm(path, kind="image"):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read(), kind)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_csv(path, header, rows):
    """Comma-separated with a header row and LF line endings."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[h] for h in header] if isinstance(row, dict) else list(row))


def write_map_csv(pixel_map, path):
    v = pixel_map.values if isinstance(pixel_map, PixelMap) else np.asarray(pixel_map)
    with open(path, "w", newline="") as fh:
        for row in v:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def read_map_csv(path, kind="cam"):
    with open(path) as fh:
        rows = [[float(x) for x in line.split(",")] for line in fh if line.strip()]
    return PixelMap(np.array(rows), kind)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"EUNC"
CHECKPOINT_VERSION = 1


def encode_tensors(tensors):
    """Serialise ``{name: array}`` in the EUNC layout (all integers little-endian u32)."""
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr), dtype=np.float64)
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.astype("<f8").tobytes())
    return out.getvalue()


def decode_tensors(buf):
    if len(buf) < 12:
        raise FormatError("checkpoint truncated in header", len(buf))
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})", 4)
    pos = 12

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("checkpoint truncated", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        tensors[name] = data
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint payload", pos)
    return tensors


def write_tensors(path, tensors):
    with open(path, "wb") as fh:
        fh.write(encode_tensors(tensors))


def read_tensors(path):
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())


def save_checkpoint(model, path):
    write_tensors(path, {k: v.data for k, v in model.params.items()})


def infer_config(tensors):
    """Recover the :class:`~eunets.models.ModelConfig` implied by parameter names and shapes."""
    from .models import ModelConfig

    try:
        depth = max(int(k[3:].split(".")[0]) for k in tensors if k.startswith("dec"))
        enc0 = tensors["enc0.conv1.w"]
        head = tensors["head.w"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint does not describe an EU-Net model: {exc}") from exc
    backbone = "unetpp" if any(k.startswith("node") for k in tensors) else "unet"
    mhex_key = f"dec{depth}.mhex.c1"
    with_mhex = mhex_key in tensors
    hidden = tensors[mhex_key].shape[0] if with_mhex else 16
    return ModelConfig(
        backbone=backbone,
        with_mhex=with_mhex,
        in_channels=enc0.shape[1],
        class_count=head.shape[0],
        base_width=enc0.shape[0],
        depth=depth,
        mhex_hidden=hidden,
    )


def load_checkpoint(path):
    from .models import build_model

    tensors = read_tensors(path)
    model = build_model(infer_config(tensors))
    extra = set(tensors) - set(model.params)
    if extra:
        raise FormatError(f"unexpected tensors in checkpoint: {sorted(extra)[:3]}")
    model.set_state(tensors)
    return model


# ---------------------------------------------------------------------------
# Cross-validation folds
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    assignments: dict
    seed: int

    def fold(self, index):
        return [i for i, f in self.assignments.items() if f == index]

    def folds(self):
        return [self.fold(i) for i in range(self.k)]


def kfold(ids, k=5, seed=0):
    """Seeded shuffle, then round-robin assignment to ``k`` folds."""
    ids = list(ids)
    if k < 1 or k > len(ids):
        raise ContractViolation(f"k must be in [1, {len(ids)}], got {k}")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan(k, {ids[j]: pos % k for pos, j in enumerate(order)}, seed)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
