"""Procedural paired (image, mask, attributes) data and a directory format for it.

Each sample is a stylized face: background, hair, a face oval, eyes, a
mouth and optional glasses and hat. Masks and attribute bits are read off
the renderer's own state, so they are exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from ._exceptions import ConfigurationError, ContractError

__all__ = [
    "PARTS",
    "ATTRIBUTES",
    "RendererSpec",
    "SamplePair",
    "PairedDataset",
    "SwapResult",
    "IngestIssue",
    "generate_dataset",
    "mask_component_swap",
    "export_dataset",
    "ingest_external",
    "split_of",
    "check_mask",
]

PARTS = ("skin", "eyes", "hair", "mouth", "glasses", "hat")
ATTRIBUTES = ("has_glasses", "has_hat", "hair_dark", "smiling", "face_left", "face_right",
              "skin_light", "hair_long")

_SKIN = {True: (0.93, 0.78, 0.65), False: (0.52, 0.35, 0.24)}
_HAIR = {True: (0.12, 0.08, 0.06), False: (0.90, 0.74, 0.36)}
_HATS = ((0.80, 0.15, 0.15), (0.15, 0.55, 0.20), (0.20, 0.30, 0.85))
_BACKGROUNDS = ((0.55, 0.70, 0.85), (0.70, 0.80, 0.65), (0.80, 0.72, 0.80), (0.60, 0.60, 0.60))
_EYES = ((0.10, 0.15, 0.45), (0.25, 0.15, 0.08))
_MOUTH = (0.72, 0.18, 0.22)
_GLASSES = (0.04, 0.04, 0.04)


@dataclass(frozen=True)
class RendererSpec:
    """Geometry and sampling probabilities for the face renderer."""

    size: int = 32
    parts: tuple = PARTS
    p_glasses: float = 0.5
    p_hat: float = 0.5
    noise: float = 0.015

    def __post_init__(self):
        parts = tuple(self.parts)
        object.__setattr__(self, "parts", parts)
        if not parts:
            raise ConfigurationError("parts: at least one part is required")
        unknown = set(parts) - set(PARTS)
        if unknown:
            raise ConfigurationError(f"parts: unknown part names {sorted(unknown)}")
        if "skin" not in parts:
            raise ConfigurationError("parts: 'skin' is required, every face has one")
        if len(set(parts)) != len(parts):
            raise ConfigurationError("parts: duplicate names")
        if self.size < 16 or self.size % 4:
            raise ConfigurationError(f"size must be >= 16 and divisible by 4, got {self.size}")
        for name in ("p_glasses", "p_hat"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.noise < 0:
            raise ConfigurationError("noise must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["parts"] = list(self.parts)
        return d


@dataclass(frozen=True)
class SamplePair:
    image: np.ndarray  # (3, H, W) float32 in [-1, 1]
    mask: np.ndarray  # (M, H, W) uint8 one-hot, background is all-zero
    attrs: np.ndarray  # (A,) uint8
    id: str

    def __eq__(self, other):
        if not isinstance(other, SamplePair):
            return NotImplemented
        return (self.id == other.id and np.array_equal(self.image, other.image)
                and np.array_equal(self.mask, other.mask)
                and np.array_equal(self.attrs, other.attrs))

    __hash__ = None


def check_mask(mask: np.ndarray) -> None:
    """Raise ``ContractError`` unless ``mask`` is a binary stack with at most one part per pixel."""
    mask = np.asarray(mask)
    if mask.ndim < 3:
        raise ContractError(f"mask must be (..., M, H, W), got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ContractError("mask entries must be 0 or 1")
    if (mask.sum(axis=-3) > 1).any():
        raise ContractError("mask has pixels assigned to more than one part")


@dataclass
class PairedDataset:
    """Array-backed sequence of :class:`SamplePair`."""

    images: np.ndarray
    masks: np.ndarray
    attrs: np.ndarray
    ids: list
    parts: tuple = PARTS
    attribute_names: tuple = ATTRIBUTES

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i) -> SamplePair:
        return SamplePair(self.images[i], self.masks[i], self.attrs[i], self.ids[i])

    def __iter__(self) -> Iterator[SamplePair]:
        return (self[i] for i in range(len(self)))

    def subset(self, index) -> "PairedDataset":
        index = np.asarray(index, dtype=int)
        return PairedDataset(self.images[index], self.masks[index], self.attrs[index],
                             [self.ids[i] for i in index], self.parts, self.attribute_names)

    def split(self, val_every: int = 6) -> tuple["PairedDataset", "PairedDataset"]:
        """Deterministic train/val split by hashed sample id (5:1 by default)."""
        val = np.array([split_of(i, val_every) == "val" for i in self.ids], dtype=bool)
        return self.subset(np.flatnonzero(~val)), self.subset(np.flatnonzero(val))

    def index_of(self, sample_id: str) -> int:
        try:
            return self.ids.index(sample_id)
        except ValueError:
            raise KeyError(f"unknown sample id {sample_id!r}") from None

    @classmethod
    def from_pairs(cls, pairs: Sequence[SamplePair], parts=PARTS,
                   attribute_names=ATTRIBUTES, size: int = 32) -> "PairedDataset":
        if not pairs:
            return cls(np.zeros((0, 3, size, size), np.float32),
                       np.zeros((0, len(parts), size, size), np.uint8),
                       np.zeros((0, len(attribute_names)), np.uint8), [], tuple(parts),
                       tuple(attribute_names))
        return cls(np.stack([p.image for p in pairs]).astype(np.float32),
                   np.stack([p.mask for p in pairs]).astype(np.uint8),
                   np.stack([p.attrs for p in pairs]).astype(np.uint8),
                   [p.id for p in pairs], tuple(parts), tuple(attribute_names))


def split_of(sample_id: str, val_every: int = 6) -> str:
    h = int(hashlib.sha256(sample_id.encode()).hexdigest(), 16)
    return "val" if h % val_every == 0 else "train"


def _jitter(rng, color, amount=0.04):
    return np.clip(np.asarray(color) + rng.uniform(-amount, amount, 3), 0.0, 1.0)


def _render(rng: np.random.Generator, spec: RendererSpec):
    s = spec.size
    k = s / 32.0
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5

    offset = int(rng.integers(-1, 2))
    has_glasses = "glasses" in spec.parts and rng.random() < spec.p_glasses
    has_hat = "hat" in spec.parts and rng.random() < spec.p_hat
    hair_dark = bool(rng.random() < 0.5)
    smiling = "mouth" in spec.parts and rng.random() < 0.5
    skin_light = bool(rng.random() < 0.5)
    hair_long = "hair" in spec.parts and rng.random() < 0.5

    cx = s / 2 + offset * 4.5 * k + rng.uniform(-0.5, 0.5) * k
    cy = s * 0.56 + rng.uniform(-0.5, 0.5) * k
    rx = rng.uniform(6.5, 8.0) * k
    ry = rng.uniform(8.5, 10.0) * k

    def ellipse(x0, y0, ax, ay):
        return ((xx - x0) / ax) ** 2 + ((yy - y0) / ay) ** 2 <= 1.0

    label = np.zeros((s, s), dtype=np.int64)
    code = {p: i + 1 for i, p in enumerate(spec.parts)}

    def paint(region, part):
        if part in code:
            label[region] = code[part]

    if "hair" in spec.parts:
        if hair_long:
            hair = ellipse(cx, cy - 1.0 * k, rx + 2.5 * k, ry + 2.5 * k) & (yy <= cy)
            hair |= (np.abs(xx - cx) <= rx + 2.5 * k) & (yy > cy) & (yy <= cy + 0.8 * ry)
        else:
            hair = ellipse(cx, cy - 2.5 * k, rx + 1.8 * k, ry + 1.2 * k) & (yy <= cy)
        paint(hair, "hair")
    paint(ellipse(cx, cy, rx, ry), "skin")
    ey = cy - 0.2 * ry
    eye_x = (cx - 0.42 * rx, cx + 0.42 * rx)
    if "eyes" in spec.parts:
        for ex in eye_x:
            paint(ellipse(ex, ey, 1.6 * k, 1.1 * k), "eyes")
    if "mouth" in spec.parts:
        my = cy + 0.38 * ry
        if smiling:
            mouth = ellipse(cx, my, 0.45 * rx, 0.28 * ry) & (yy >= my)
        else:
            mouth = (np.abs(xx - cx) <= 0.25 * rx) & (np.abs(yy - (my + 0.5 * k)) <= 0.5 * k)
        paint(mouth, "mouth")
    if has_hat:
        brim_y = cy - 0.55 * ry
        crown = (np.abs(xx - cx) <= 0.9 * rx) & (yy >= cy - ry - 5 * k) & (yy <= brim_y)
        brim = (np.abs(xx - cx) <= rx + 3 * k) & (np.abs(yy - brim_y) <= 1.0 * k)
        paint(crown | brim, "hat")
    if has_glasses:
        frame = np.zeros_like(label, dtype=bool)
        for ex in eye_x:
            outer = (np.abs(xx - ex) <= 2.6 * k) & (np.abs(yy - ey) <= 2.0 * k)
            inner = (np.abs(xx - ex) <= 1.6 * k) & (np.abs(yy - ey) <= 1.1 * k)
            frame |= outer & ~inner
        frame |= (np.abs(yy - ey) <= 0.5 * k) & (xx >= eye_x[0]) & (xx <= eye_x[1]) & (label != code.get("eyes", -1))
        paint(frame, "glasses")

    colors = {0: _jitter(rng, _BACKGROUNDS[rng.integers(len(_BACKGROUNDS))], 0.08)}
    palette = {
        "skin": _jitter(rng, _SKIN[skin_light]),
        "hair": _jitter(rng, _HAIR[hair_dark]),
        "eyes": _jitter(rng, _EYES[rng.integers(len(_EYES))]),
        "mouth": _jitter(rng, _MOUTH),
        "glasses": _jitter(rng, _GLASSES, 0.02),
        "hat": _jitter(rng, _HATS[rng.integers(len(_HATS))]),
    }
    for p, c in code.items():
        colors[c] = palette[p]
    rgb = np.zeros((s, s, 3))
    for c, col in colors.items():
        rgb[label == c] = col
    shade = 1.0 - 0.12 * (yy - s / 2) / s
    rgb = rgb * shade[..., None] + rng.normal(0.0, spec.noise, rgb.shape)
    pixels = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)

    mask = np.stack([(label == code[p]) for p in spec.parts]).astype(np.uint8)
    attrs = np.array([has_glasses, has_hat, hair_dark, smiling, offset == -1, offset == 1,
                      skin_light, hair_long], dtype=np.uint8)
    return pixels, mask, attrs


def _to_unit(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def _to_pixels(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(image).transpose(1, 2, 0) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def generate_dataset(n: int, seed: int = 0, spec: RendererSpec = RendererSpec()) -> PairedDataset:
    """Render ``n`` samples; sample ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    if not isinstance(spec, RendererSpec):
        spec = RendererSpec(**spec)
    images, masks, attrs = [], [], []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        pixels, mask, bits = _render(rng, spec)
        images.append(_to_unit(pixels))
        masks.append(mask)
        attrs.append(bits)
    ids = [f"s{seed}_{i:06d}" for i in range(n)]
    return PairedDataset(np.stack(images), np.stack(masks), np.stack(attrs), ids, spec.parts)


@dataclass
class SwapResult:
    """Masks after a component swap plus the pixels claimed by several parts."""

    first: np.ndarray
    second: np.ndarray
    conflicts_first: np.ndarray = field(repr=False)
    conflicts_second: np.ndarray = field(repr=False)

    @property
    def coherent(self) -> bool:
        return not (self.conflicts_first.any() or self.conflicts_second.any())

    def __iter__(self):
        return iter((self.first, self.second))


def mask_component_swap(a, b, parts: Iterable[str], part_names: Sequence[str] = PARTS) -> SwapResult:
    """Exchange the named channels between two masks, with no re-alignment.

    ``a`` and ``b`` are :class:`SamplePair` objects or raw ``(M, H, W)``
    masks. Overlaps created by the swap are reported in the ``conflicts_*``
    maps, never repaired.
    """
    ma = np.array(a.mask if isinstance(a, SamplePair) else a, dtype=np.uint8)
    mb = np.array(b.mask if isinstance(b, SamplePair) else b, dtype=np.uint8)
    if ma.shape != mb.shape:
        raise ContractError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    parts = list(parts)
    unknown = [p for p in parts if p not in part_names]
    if unknown:
        raise ContractError(f"unknown part names {unknown}; known: {list(part_names)}")
    for p in parts:
        c = part_names.index(p)
        ma[c], mb[c] = mb[c].copy(), ma[c].copy()
    return SwapResult(ma, mb, ma.sum(axis=0) > 1, mb.sum(axis=0) > 1)


def _palette(n_parts: int) -> list:
    colors = [(0, 0, 0), (230, 190, 160), (40, 60, 160), (120, 70, 30), (200, 40, 60),
              (20, 20, 20), (60, 160, 60)]
    while len(colors) <= n_parts:
        colors.append(tuple(int(v) for v in np.random.default_rng(len(colors)).integers(0, 256, 3)))
    return [v for c in colors[: n_parts + 1] for v in c]


def mask_to_labels(mask: np.ndarray) -> np.ndarray:
    """One-hot ``(M, H, W)`` stack to an index map (0 = background, ``c + 1`` = channel ``c``)."""
    check_mask(mask)
    labels = np.zeros(mask.shape[1:], dtype=np.uint8)
    for c in range(mask.shape[0]):
        labels[mask[c] == 1] = c + 1
    return labels


def labels_to_mask(labels: np.ndarray, n_parts: int) -> np.ndarray:
    return np.stack([(labels == c + 1) for c in range(n_parts)]).astype(np.uint8)


def export_dataset(ds: PairedDataset, directory, seed=None, spec: RendererSpec | None = None) -> Path:
    """Write ``images/``, ``masks/`` (palette PNG), ``attributes.csv`` and ``manifest.json``."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    palette = _palette(len(ds.parts))
    for pair in ds:
        Image.fromarray(_to_pixels(pair.image), mode="RGB").save(root / "images" / f"{pair.id}.png")
        img = Image.fromarray(mask_to_labels(pair.mask), mode="P")
        img.putpalette(palette)
        img.save(root / "masks" / f"{pair.id}.png")
    with open(root / "attributes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + [f"bit_{i}" for i in range(len(ds.attribute_names))])
        for sid, bits in zip(ds.ids, ds.attrs):
            writer.writerow([sid] + [int(b) for b in bits])
    manifest = {
        "format": "mcldm-dataset/1",
        "size": int(ds.images.shape[-1]) if len(ds) else (spec.size if spec else 32),
        "channels": {"0": "background", **{str(i + 1): p for i, p in enumerate(ds.parts)}},
        "attributes": list(ds.attribute_names),
        "renderer": spec.to_dict() if spec is not None else None,
        "seed": seed,
        "split": {sid: split_of(sid) for sid in ds.ids},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


@dataclass(frozen=True)
class IngestIssue:
    id: str
    reason: str


def _read_manifest(root: Path):
    path = root / "manifest.json"
    if not path.exists():
        return list(PARTS), list(ATTRIBUTES), None
    manifest = json.loads(path.read_text())
    channels = manifest.get("channels", {})
    parts = [channels[k] for k in sorted((k for k in channels if k != "0"), key=int)]
    return parts or list(PARTS), manifest.get("attributes", list(ATTRIBUTES)), manifest.get("size")


def _load_mask(root: Path, sid: str, n_parts: int):
    npy = root / "masks" / f"{sid}.npy"
    png = root / "masks" / f"{sid}.png"
    if npy.exists():
        mask = np.load(npy)
        if mask.ndim != 3 or mask.shape[0] != n_parts:
            raise ContractError(f"mask stack must be ({n_parts}, H, W), got {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise ContractError("mask entries must be 0 or 1")
        if (mask.sum(axis=0) > 1).any():
            raise ContractError("mask has pixels assigned to more than one part")
        return mask.astype(np.uint8)
    if png.exists():
        with Image.open(png) as img:
            if img.mode not in ("P", "L"):
                raise ContractError(f"mask PNG must be indexed or grayscale, got mode {img.mode}")
            labels = np.array(img)
        if labels.max(initial=0) > n_parts:
            raise ContractError(f"mask index {int(labels.max())} exceeds {n_parts} channels")
        return labels_to_mask(labels, n_parts)
    raise FileNotFoundError(f"missing mask for {sid}")


def ingest_external(directory) -> tuple[PairedDataset, list[IngestIssue]]:
    """Load and validate a dataset directory.

    Every id seen in ``attributes.csv`` or ``images/`` ends up either in the
    returned dataset or in the issue list, never silently dropped.
    """
    root = Path(directory)
    parts, attr_names, size = _read_manifest(root)
    n_attr = len(attr_names)
    issues: list[IngestIssue] = []
    rows: dict[str, np.ndarray] = {}
    order: list[str] = []
    csv_path = root / "attributes.csv"
    if csv_path.exists():
        with open(csv_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            expected = ["sample_id"] + [f"bit_{i}" for i in range(n_attr)]
            if header is not None and header != expected:
                issues.append(IngestIssue("attributes.csv", f"unexpected header {header}"))
                header = None
            for lineno, row in enumerate(reader, start=2):
                if header is None:
                    break
                sid = row[0] if row else f"<line {lineno}>"
                if sid in rows or any(i.id == sid for i in issues):
                    issues.append(IngestIssue(sid, "duplicate attribute row"))
                    continue
                order.append(sid)
                if len(row) != n_attr + 1 or any(v not in ("0", "1") for v in row[1:]):
                    issues.append(IngestIssue(sid, f"malformed attribute row at line {lineno}"))
                    continue
                rows[sid] = np.array([int(v) for v in row[1:]], dtype=np.uint8)
    image_ids = sorted(p.stem for p in (root / "images").glob("*.png")) if (root / "images").is_dir() else []
    for sid in image_ids:
        if sid not in rows and sid not in order:
            order.append(sid)
            issues.append(IngestIssue(sid, "image without attribute row"))

    pairs = []
    for sid in order:
        if sid not in rows:
            continue
        try:
            img_path = root / "images" / f"{sid}.png"
            if not img_path.exists():
                raise FileNotFoundError(f"missing image for {sid}")
            with Image.open(img_path) as img:
                pixels = np.array(img.convert("RGB"))
            if size is not None and pixels.shape[:2] != (size, size):
                raise ContractError(f"image is {pixels.shape[:2]}, manifest says {size}x{size}")
            mask = _load_mask(root, sid, len(parts))
            if mask.shape[1:] != pixels.shape[:2]:
                raise ContractError("mask and image geometry differ")
        except (OSError, ContractError, ValueError) as exc:
            issues.append(IngestIssue(sid, str(exc)))
            continue
        pairs.append(SamplePair(_to_unit(pixels), mask, rows[sid], sid))
    ds = PairedDataset.from_pairs(pairs, parts, attr_names, size or 32)
    return ds, issues
