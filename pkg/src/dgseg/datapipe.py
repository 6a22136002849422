"""Datasets, label remapping, augmentation, source/wild pairing and the synthetic multi-domain generator."""
from __future__ import annotations

import colorsys
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataIntegrityError, ParameterError

log = logging.getLogger(__name__)

IGNORE_ID = 255
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class LabeledSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    label: np.ndarray  # [H, W] int64 class ids or IGNORE_ID


@dataclass
class WildSample:
    image: np.ndarray


# ---------------------------------------------------------------------------
# label remapping


def read_mapping(path) -> dict[int, int]:
    """Two-column CSV ``raw_id,train_id``; a non-numeric first row is taken as a header."""
    mapping = {}
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh)):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                raw, train = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                if n == 0:
                    continue
                raise DataIntegrityError(f"{path}:{n + 1}: bad mapping row {row!r}")
            mapping[raw] = train
    return mapping


def remap_labels(raw, mapping: dict[int, int], ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Translate raw ids via ``mapping``; ids not in the mapping become ``ignore_id``."""
    raw = np.asarray(raw)
    if raw.size == 0:
        return raw.astype(np.int64)
    top = max(int(raw.max()), max(mapping, default=0)) + 1
    lut = np.full(top, ignore_id, dtype=np.int64)
    for k, v in mapping.items():
        if k >= 0:
            lut[k] = v
    if raw.min() < 0:
        raise DataIntegrityError("negative raw label id")
    return lut[raw]


# ---------------------------------------------------------------------------
# datasets


class ArrayDataset:
    """In-memory dataset. ``labels`` is None for wild data."""

    def __init__(self, images: Sequence[np.ndarray], labels: Sequence[np.ndarray] | None = None, name: str = ""):
        if labels is not None and len(labels) != len(images):
            raise DataIntegrityError("images and labels differ in length")
        self.images = list(images)
        self.labels = None if labels is None else list(labels)
        self.name = name

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        if self.labels is None:
            return WildSample(self.images[i])
        return LabeledSample(self.images[i], self.labels[i])


def _read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _read_label(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise DataIntegrityError(f"label {path} is not single-channel (mode {im.mode})")
        return np.asarray(im, dtype=np.int64)


class FolderDataset:
    """``root/images/*.{png,jpg}`` paired by stem with ``root/labels/*.png``."""

    def __init__(self, root, role: str = "source", mapping: dict[int, int] | None = None,
                 ignore_id: int = IGNORE_ID, name: str | None = None):
        root = Path(root)
        if role not in ("source", "wild", "eval"):
            raise ParameterError(f"unknown dataset role {role!r}")
        image_dir = root / "images"
        if not image_dir.is_dir():
            raise DataIntegrityError(f"{image_dir} does not exist")
        self.image_paths = sorted(
            (p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=lambda p: p.stem
        )
        self.label_paths = None
        if role != "wild":
            label_dir = root / "labels"
            self.label_paths = []
            for p in self.image_paths:
                lp = label_dir / f"{p.stem}.png"
                if not lp.is_file():
                    raise DataIntegrityError(f"missing label for {p.stem!r} in {label_dir}")
                self.label_paths.append(lp)
        self.role = role
        self.mapping = mapping
        self.ignore_id = ignore_id
        self.name = name or root.name

    @property
    def labeled(self) -> bool:
        return self.label_paths is not None

    def __len__(self):
        return len(self.image_paths)

    def __getitem__(self, i):
        image = _read_image(self.image_paths[i])
        if self.label_paths is None:
            return WildSample(image)
        label = _read_label(self.label_paths[i])
        if self.mapping is not None:
            label = remap_labels(label, self.mapping, self.ignore_id)
        if label.shape != image.shape[1:]:
            raise DataIntegrityError(f"{self.image_paths[i].stem}: image and label sizes differ")
        return LabeledSample(image, label)


def load_dataset(root, mapping_file=None, role: str = "source", ignore_id: int = IGNORE_ID) -> FolderDataset:
    mapping = read_mapping(mapping_file) if mapping_file else None
    ds = FolderDataset(root, role, mapping, ignore_id)
    if role != "wild" and len(ds) == 0:
        raise DataIntegrityError(f"no images under {root}/images")
    log.info("loaded %s dataset %s with %d images", role, root, len(ds))
    return ds


def write_dataset(ds, root) -> Path:
    """Materialize a dataset in the folder layout read by :class:`FolderDataset`."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if ds.labeled:
        (root / "labels").mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(ds))))
    for i in range(len(ds)):
        sample = ds[i]
        stem = f"{i:0{width}d}"
        img = (np.clip(sample.image, 0, 1).transpose(1, 2, 0) * 255 + 0.5).astype(np.uint8)
        Image.fromarray(img).save(root / "images" / f"{stem}.png")
        if isinstance(sample, LabeledSample):
            Image.fromarray(sample.label.astype(np.uint8), mode="L").save(root / "labels" / f"{stem}.png")
    return root


# ---------------------------------------------------------------------------
# augmentation


def _resize_image(image: np.ndarray, size) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0].numpy()


def _resize_label(label: np.ndarray, size) -> np.ndarray:
    t = torch.from_numpy(label.astype(np.float32))[None, None]
    return F.interpolate(t, size=size, mode="nearest")[0, 0].numpy().astype(np.int64)


def _crop(image, label, crop: int, rng: np.random.Generator, ignore_id: int):
    _, h, w = image.shape
    ph, pw = max(crop - h, 0), max(crop - w, 0)
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        if label is not None:
            label = np.pad(label, ((0, ph), (0, pw)), constant_values=ignore_id)
        h, w = h + ph, w + pw
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    image = image[:, top : top + crop, left : left + crop]
    if label is not None:
        label = label[top : top + crop, left : left + crop]
    return image, label


def augment(sample: LabeledSample, rng: np.random.Generator, crop_size: int,
            scale_range=(0.5, 2.0), ignore_id: int = IGNORE_ID) -> LabeledSample:
    """Random rescale (bilinear image, nearest label) followed by a synchronized random crop."""
    lo, hi = scale_range
    scale = float(rng.uniform(lo, hi))
    image, label = sample.image, sample.label
    _, h, w = image.shape
    size = (max(1, round(h * scale)), max(1, round(w * scale)))
    if size != (h, w):
        image, label = _resize_image(image, size), _resize_label(label, size)
    image, label = _crop(image, label, crop_size, rng, ignore_id)
    return LabeledSample(np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(label))


def prepare_wild(sample: WildSample, rng: np.random.Generator, crop_size: int) -> WildSample:
    """Resize the short side to ``crop_size`` then random-crop a square."""
    image = sample.image
    _, h, w = image.shape
    s = crop_size / min(h, w)
    size = (max(crop_size, round(h * s)), max(crop_size, round(w * s)))
    if size != (h, w):
        image = _resize_image(image, size)
    image, _ = _crop(image, None, crop_size, rng, IGNORE_ID)
    return WildSample(np.ascontiguousarray(image, dtype=np.float32))


# ---------------------------------------------------------------------------
# pairing


class EpochSampler:
    """Endless index stream: a fresh permutation every epoch."""

    def __init__(self, n: int):
        if n < 1:
            raise DataIntegrityError("cannot sample from an empty dataset")
        self.n = n
        self.perm: list[int] = []
        self.pos = 0

    def next(self, rng: np.random.Generator) -> int:
        if self.pos >= len(self.perm):
            self.perm = rng.permutation(self.n).tolist()
            self.pos = 0
        self.pos += 1
        return self.perm[self.pos - 1]

    def state(self) -> dict:
        return {"perm": list(self.perm), "pos": self.pos}

    def load_state(self, state: dict) -> None:
        self.perm, self.pos = [int(i) for i in state["perm"]], int(state["pos"])


class PairedBatcher:
    """Draws (augmented source, prepared wild) pairs from two independently shuffled streams."""

    def __init__(self, source_ds, wild_ds, rng: np.random.Generator, batch_size: int, crop_size: int,
                 scale_range=(0.5, 2.0), ignore_id: int = IGNORE_ID):
        if len(source_ds) == 0 or len(wild_ds) == 0:
            raise DataIntegrityError("source and wild datasets must be non-empty")
        self.source_ds, self.wild_ds = source_ds, wild_ds
        self.rng = rng
        self.batch_size = batch_size
        self.crop_size = crop_size
        self.scale_range = tuple(scale_range)
        self.ignore_id = ignore_id
        self.source_sampler = EpochSampler(len(source_ds))
        self.wild_sampler = EpochSampler(len(wild_ds))

    def next_batch(self) -> list[tuple[LabeledSample, WildSample]]:
        pairs = []
        for _ in range(self.batch_size):
            src = self.source_ds[self.source_sampler.next(self.rng)]
            wild = self.wild_ds[self.wild_sampler.next(self.rng)]
            if isinstance(wild, LabeledSample):
                wild = WildSample(wild.image)
            pairs.append((
                augment(src, self.rng, self.crop_size, self.scale_range, self.ignore_id),
                prepare_wild(wild, self.rng, self.crop_size),
            ))
        return pairs

    def state(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "source": self.source_sampler.state(),
            "wild": self.wild_sampler.state(),
        }

    def load_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.source_sampler.load_state(state["source"])
        self.wild_sampler.load_state(state["wild"])


def pair_batch(source_ds, wild_ds, rng: np.random.Generator, batch_size: int, crop_size: int,
               scale_range=(0.5, 2.0)) -> list[tuple[LabeledSample, WildSample]]:
    """One batch of pairs from fresh samplers; use :class:`PairedBatcher` for a training stream."""
    return PairedBatcher(source_ds, wild_ds, rng, batch_size, crop_size, scale_range).next_batch()


def collate(pairs) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    x_src = torch.from_numpy(np.stack([s.image for s, _ in pairs]))
    y_src = torch.from_numpy(np.stack([s.label for s, _ in pairs]))
    x_wild = torch.from_numpy(np.stack([w.image for _, w in pairs]))
    return x_src, y_src, x_wild


# ---------------------------------------------------------------------------
# synthetic multi-domain data

SHAPES = ("circle", "square", "triangle", "cross", "ring")
WILD_SHAPES = ("ellipse", "diamond", "hexagon", "bar", "blob")


@dataclass(frozen=True)
class DomainStyle:
    hue: tuple[float, float]
    saturation: tuple[float, float]
    value: tuple[float, float]  # background brightness
    fg_value: tuple[float, float] | None = None  # object brightness; defaults to ``value``
    noise: float = 0.02
    stripes: float = 0.0  # amplitude of a multiplicative sinusoidal texture


DOMAIN_STYLES = {
    "source": DomainStyle(hue=(0.0, 0.14), saturation=(0.5, 1.0), value=(0.1, 0.45), fg_value=(0.65, 1.0), noise=0.02),
    # dim blue: hue and brightness shift
    "unseen_b": DomainStyle(hue=(0.55, 0.75), saturation=(0.2, 0.7), value=(0.05, 0.3), fg_value=(0.35, 0.6), noise=0.03),
    # washed-out green: hue, saturation and contrast shift
    "unseen_c": DomainStyle(hue=(0.2, 0.4), saturation=(0.15, 0.5), value=(0.15, 0.4), fg_value=(0.5, 0.8), noise=0.04),
}


@dataclass
class ToyConfig:
    num_classes: int = 4
    image_size: int = 96
    n_source: int = 256
    n_val: int = 48
    n_unseen: int = 48
    unseen_domains: int = 2
    n_wild: int = 64
    radius: tuple[float, float] = (9.0, 16.0)


@dataclass
class ToyData:
    source: ArrayDataset
    seen_val: ArrayDataset
    unseen: dict[str, ArrayDataset]
    wild: ArrayDataset
    config: ToyConfig = field(default_factory=ToyConfig)

    def eval_domains(self) -> dict[str, ArrayDataset]:
        return {"source": self.seen_val, **self.unseen}


def _shape_mask(kind: str, yy, xx, cy, cx, r, rng):
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        s = r * 0.85
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if kind == "triangle":
        # upward isosceles triangle inscribed in the circle of radius r
        top, base = -r, r * 0.6
        half = (dy - top) / (base - top) * r * 0.95
        return (dy >= top) & (dy <= base) & (np.abs(dx) <= half)
    if kind == "cross":
        t = r * 0.35
        return ((np.abs(dy) <= r) & (np.abs(dx) <= t)) | ((np.abs(dx) <= r) & (np.abs(dy) <= t))
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "ellipse":
        a, b = r, r * rng.uniform(0.35, 0.6)
        th = rng.uniform(0, np.pi)
        u, v = dx * np.cos(th) + dy * np.sin(th), -dx * np.sin(th) + dy * np.cos(th)
        return (u / a) ** 2 + (v / b) ** 2 <= 1
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "hexagon":
        q = r * 0.866
        return (np.abs(dy) <= q) & (np.abs(dy) * 0.577 + np.abs(dx) <= r)
    if kind == "bar":
        th = rng.uniform(0, np.pi)
        u, v = dx * np.cos(th) + dy * np.sin(th), -dx * np.sin(th) + dy * np.cos(th)
        return (np.abs(u) <= r) & (np.abs(v) <= r * 0.25)
    if kind == "blob":
        ang = np.arctan2(dy, dx)
        k, ph = rng.integers(3, 7), rng.uniform(0, 2 * np.pi)
        return np.sqrt(dy**2 + dx**2) <= r * (0.75 + 0.25 * np.sin(k * ang + ph))
    raise ValueError(kind)


def _color(style: DomainStyle, rng, fg: bool = False) -> np.ndarray:
    h = rng.uniform(*style.hue) % 1.0
    s = rng.uniform(*style.saturation)
    v = rng.uniform(*(style.fg_value if fg and style.fg_value else style.value))
    return np.array(colorsys.hsv_to_rgb(h, s, v), dtype=np.float32)


def _distinct_color(style, rng, avoid: np.ndarray, min_dist=0.3, tries=50):
    best, best_d = None, -1.0
    for _ in range(tries):
        c = _color(style, rng, fg=True)
        d = float(np.linalg.norm(c - avoid))
        if d >= min_dist:
            return c
        if d > best_d:
            best, best_d = c, d
    # fall back to a value-flipped version of the best candidate
    return np.clip(1.0 - best, 0, 1) if best_d < min_dist / 2 else best


def _place(rng, size, radii, placed):
    for _ in range(200):
        r = rng.uniform(*radii)
        cy, cx = rng.uniform(r, size - r, size=2)
        if all((cy - py) ** 2 + (cx - px) ** 2 > (r + pr + 2) ** 2 for py, px, pr in placed):
            placed.append((cy, cx, r))
            return cy, cx, r
    return None


def render_scene(rng: np.random.Generator, style: DomainStyle, shapes: Sequence[tuple[str, int]],
                 size: int, radii) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``shapes`` (``(kind, class_id)`` pairs) on a textured background.

    Returns ``(image [3,H,W] float32, label [H,W] int64)``.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    bg = _color(style, rng)
    image = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
    label = np.zeros((size, size), dtype=np.int64)
    placed: list = []
    for kind, cls in shapes:
        spot = _place(rng, size, radii, placed)
        if spot is None:
            continue
        mask = _shape_mask(kind, yy, xx, *spot, rng)
        image[:, mask] = _distinct_color(style, rng, bg)[:, None]
        label[mask] = cls
    if style.stripes > 0:
        th, freq = rng.uniform(0, np.pi), rng.uniform(0.15, 0.5)
        wave = np.sin(freq * (xx * np.cos(th) + yy * np.sin(th)) + rng.uniform(0, 2 * np.pi))
        image = image * (1 + style.stripes * wave)[None]
    image = image + rng.normal(0, style.noise, size=image.shape)
    return np.clip(image, 0, 1).astype(np.float32), label


def _scene_shapes(rng, num_classes):
    out = []
    for cls in range(1, num_classes):
        out += [(SHAPES[cls - 1], cls)] * int(rng.integers(1, 3))
    rng.shuffle(out)
    return out


def _labeled_domain(rng, style, n, cfg: ToyConfig, name):
    images, labels = [], []
    for _ in range(n):
        img, lab = render_scene(rng, style, _scene_shapes(rng, cfg.num_classes), cfg.image_size, cfg.radius)
        images.append(img)
        labels.append(lab)
    return ArrayDataset(images, labels, name=name)


def _wild_style(rng) -> DomainStyle:
    h0 = rng.uniform(0, 1)
    return DomainStyle(
        hue=(h0, h0 + rng.uniform(0.1, 0.6)),
        saturation=(rng.uniform(0, 0.5), 1.0),
        value=(rng.uniform(0.05, 0.5), rng.uniform(0.6, 1.0)),
        fg_value=(rng.uniform(0.05, 0.5), rng.uniform(0.6, 1.0)),
        noise=rng.uniform(0.0, 0.08),
        stripes=rng.uniform(0, 0.3) if rng.random() < 0.5 else 0.0,
    )


def synth_toy(seed: int = 0, cfg: ToyConfig | None = None) -> ToyData:
    """Seeded source / seen-validation / unseen / wild datasets.

    Labeled domains share one scene distribution (shape class decides the
    label) and differ only in palette and texture. Wild images use random
    palettes and shapes outside the labeled classes, and carry no labels.
    """
    cfg = cfg or ToyConfig()
    if not 2 <= cfg.num_classes <= len(SHAPES) + 1:
        raise ParameterError(f"num_classes must be in 2..{len(SHAPES) + 1}")
    if cfg.unseen_domains > len(DOMAIN_STYLES) - 1:
        raise ParameterError(f"at most {len(DOMAIN_STYLES) - 1} unseen domains available")
    streams = np.random.SeedSequence(seed).spawn(4 + cfg.unseen_domains)
    source = _labeled_domain(np.random.default_rng(streams[0]), DOMAIN_STYLES["source"], cfg.n_source, cfg, "source")
    seen_val = _labeled_domain(np.random.default_rng(streams[1]), DOMAIN_STYLES["source"], cfg.n_val, cfg, "source")
    unseen = {}
    for i, name in enumerate(list(DOMAIN_STYLES)[1 : 1 + cfg.unseen_domains]):
        unseen[name] = _labeled_domain(
            np.random.default_rng(streams[4 + i]), DOMAIN_STYLES[name], cfg.n_unseen, cfg, name
        )
    rng = np.random.default_rng(streams[2])
    wild_images = []
    for _ in range(cfg.n_wild):
        kinds = rng.choice(WILD_SHAPES, size=int(rng.integers(2, 6)))
        img, _ = render_scene(rng, _wild_style(rng), [(str(k), 0) for k in kinds], cfg.image_size, cfg.radius)
        wild_images.append(img)
    return ToyData(source, seen_val, unseen, ArrayDataset(wild_images, None, name="wild"), cfg)


def label_histogram(ds, num_classes: int, ignore_id: int = IGNORE_ID) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for i in range(len(ds)):
        lab = ds[i].label
        counts += np.bincount(lab[lab != ignore_id].ravel(), minlength=num_classes)[:num_classes]
    return counts / max(counts.sum(), 1)
