"""Datasets: a deterministic synthetic shape generator, an image-folder loader,
split bookkeeping and the [-1, 1] pixel normalisation used everywhere.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .errors import InvalidConfigError, InvalidInputError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
AUGMENTATIONS = ("center_crop", "horizontal_flip", "random_resized_crop")

SHAPES = ("disk", "square", "triangle", "cross", "ring",
          "hbars", "vbars", "diagonal", "checker", "dots")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    num_classes: int
    resolution: int
    splits: dict
    source: str = "synthetic"
    class_names: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_classes < 1 or self.resolution < 1:
            raise InvalidConfigError("num_classes and resolution must be positive")
        if self.source not in ("synthetic", "local-directory"):
            raise InvalidConfigError(f"unknown dataset source {self.source!r}")
        for split, n in self.splits.items():
            if split not in SPLITS or int(n) < 1:
                raise InvalidConfigError(f"bad split entry {split!r}: {n!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["class_names"] = tuple(d.get("class_names", ()))
        return cls(**d)


@dataclass
class LabeledBatch:
    images: torch.Tensor  # [N, C, H, W] in [-1, 1]
    labels: torch.Tensor  # [N] int64
    ids: list


@dataclass
class ImageDataset:
    """Fully materialised splits (small data only)."""

    spec: DatasetSpec
    images: dict   # split -> float32 tensor [N, 3, R, R] in [-1, 1]
    labels: dict   # split -> int64 tensor [N]
    ids: dict      # split -> list[str]

    def split(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        if name not in self.images:
            raise InvalidInputError(f"unknown split {name!r}; have {sorted(self.images)}")
        return self.images[name], self.labels[name]

    def split_id(self, name: str) -> str:
        return f"{self.spec.name}:{name}"


# ---------------------------------------------------------------- normalisation

def normalize(x: np.ndarray | torch.Tensor) -> torch.Tensor:
    """uint8-range pixels [0, 255] -> [-1, 1]."""
    return torch.as_tensor(x, dtype=torch.float32) / 127.5 - 1.0


def denormalize(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) * 127.5


# ---------------------------------------------------------------- synthetic data

def class_colors(k: int) -> np.ndarray:
    """Evenly spaced hues at moderate saturation, as RGB in [0, 1]."""
    hues = np.arange(k) / k
    out = []
    for h in hues:
        # hsv -> rgb with s=0.55, v=0.85
        i = int(h * 6) % 6
        f = h * 6 - int(h * 6)
        v, s = 0.85, 0.55
        p, q, tt = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
        out.append([(v, tt, p), (q, v, p), (p, v, tt), (p, q, v), (tt, p, v), (v, p, q)][i])
    return np.asarray(out)


def _shape_mask(kind: str, res: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    cx, cy = res / 2 + rng.uniform(-0.15, 0.15, size=2) * res
    r = res * rng.uniform(0.22, 0.32)
    theta = rng.uniform(-0.35, 0.35)
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    period = res / rng.uniform(3.0, 4.0)
    phase = rng.uniform(0, period)
    if kind == "disk":
        return u ** 2 + v ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    if kind == "triangle":
        return (v <= r * 0.8) & (v >= -r) & (np.abs(u) <= (v + r) * 0.6)
    if kind == "cross":
        w = r * 0.3
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if kind == "ring":
        d = np.sqrt(u ** 2 + v ** 2)
        return (d <= r) & (d >= r * 0.55)
    if kind == "hbars":
        return ((yy + phase) % period) < period / 2
    if kind == "vbars":
        return ((xx + phase) % period) < period / 2
    if kind == "diagonal":
        return np.abs(u - v) <= r * 0.45
    if kind == "checker":
        return ((((xx + phase) // period) + ((yy + phase) // period)) % 2) == 0
    if kind == "dots":
        off = r * 0.6
        rr = (r * 0.45) ** 2
        return ((u - off) ** 2 + v ** 2 <= rr) | ((u + off) ** 2 + v ** 2 <= rr)
    raise InvalidConfigError(f"unknown shape {kind!r}")


def render_sample(label: int, k: int, res: int, rng: np.random.Generator,
                  color_jitter: float = 0.12) -> np.ndarray:
    """One RGB uint8 image [res, res, 3] of class ``label``."""
    kind = SHAPES[label % len(SHAPES)]
    fg = class_colors(k)[label] + rng.uniform(-color_jitter, color_jitter, size=3)
    bg = np.full(3, rng.uniform(0.05, 0.3)) + rng.uniform(-0.05, 0.05, size=3)
    mask = _shape_mask(kind, res, rng)[..., None]
    img = np.where(mask, fg, bg) + rng.normal(0, 0.04, size=(res, res, 3))
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def make_synthetic(k: int = 10, n_per_class: int = 100, resolution: int = 16,
                   seed: int = 0, fractions: Sequence[float] = (0.6, 0.2, 0.2),
                   color_jitter: float = 0.12) -> ImageDataset:
    """Render ``k`` shape/colour classes with per-sample jitter.

    Every class owns one geometry family (``SHAPES``, cycled if ``k > 10``)
    and one hue. Each split receives the same share of every class, and the
    whole dataset is a pure function of the arguments.
    """
    if k < 2:
        raise InvalidConfigError(f"need at least 2 classes, got {k}")
    if n_per_class < 1 or resolution < 4:
        raise InvalidConfigError("n_per_class must be >= 1 and resolution >= 4")
    if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9 or min(fractions) < 0:
        raise InvalidConfigError("fractions must be three non-negative numbers summing to 1")
    counts = [int(round(f * n_per_class)) for f in fractions[:2]]
    counts.append(n_per_class - sum(counts))
    if min(counts) < 1:
        raise InvalidConfigError(f"n_per_class={n_per_class} too small for split fractions")
    rng = np.random.default_rng(seed)
    per_split = {s: ([], [], []) for s in SPLITS}
    for label in range(k):
        for i in range(n_per_class):
            img = render_sample(label, k, resolution, rng, color_jitter)
            split = SPLITS[0] if i < counts[0] else SPLITS[1] if i < counts[0] + counts[1] else SPLITS[2]
            imgs, labels, ids = per_split[split]
            imgs.append(img)
            labels.append(label)
            ids.append(f"syn{seed}-c{label}-{i}")
    spec = DatasetSpec(
        name=f"synthetic-k{k}-n{n_per_class}-r{resolution}-s{seed}", num_classes=k,
        resolution=resolution, splits={s: counts[j] * k for j, s in enumerate(SPLITS)},
        source="synthetic",
        class_names=tuple(SHAPES[c % len(SHAPES)] + (f"{c}" if k > len(SHAPES) else "")
                          for c in range(k)),
        params={"seed": seed, "n_per_class": n_per_class, "color_jitter": color_jitter,
                "fractions": list(fractions)})
    images, labels, ids = {}, {}, {}
    for s, (im, lb, idx) in per_split.items():
        images[s] = normalize(np.stack(im)).permute(0, 3, 1, 2).contiguous()
        labels[s] = torch.tensor(lb, dtype=torch.long)
        ids[s] = idx
    return ImageDataset(spec, images, labels, ids)


# ---------------------------------------------------------------- image folders

def write_image_folder(ds: ImageDataset, root: str | Path) -> Path:
    """Materialise as ``root/<split>/<class>/<id>.png`` plus ``labels.csv``."""
    from PIL import Image

    root = Path(root)
    rows = []
    for split in SPLITS:
        if split not in ds.images:
            continue
        pix = denormalize(ds.images[split]).round().clamp(0, 255).to(torch.uint8)
        for img, label, sid in zip(pix, ds.labels[split].tolist(), ds.ids[split]):
            rel = Path(split) / ds.spec.class_names[label] / f"{sid}.png"
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(img.permute(1, 2, 0).numpy()).save(root / rel)
            rows.append((sid, split, label, rel.as_posix()))
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "split", "label", "path"))
        w.writerows(rows)
    with open(root / "dataset.json", "w") as fh:
        json.dump(ds.spec.to_dict(), fh, indent=2)
    return root


def _resize_center_crop(img, res: int):
    from PIL import Image

    w, h = img.size
    scale = res / min(w, h)
    if scale != 1:
        img = img.resize((max(res, round(w * scale)), max(res, round(h * scale))),
                         Image.BILINEAR)
    w, h = img.size
    left, top = (w - res) // 2, (h - res) // 2
    return img.crop((left, top, left + res, top + res))


def load_image_folder(root: str | Path, resolution: int, on_corrupt: str = "skip",
                      name: str | None = None) -> ImageDataset:
    """Read a class-per-subdirectory tree: ``root/<split>/<class>/<image>``.

    Labels follow sorted class-directory names unless a ``dataset.json``
    beside the splits records the class order.

    Images are resized so the short side equals ``resolution`` and then
    center-cropped. ``on_corrupt`` is ``"skip"`` (log and drop the file) or
    ``"fail"`` (raise).
    """
    from PIL import Image, UnidentifiedImageError

    if on_corrupt not in ("skip", "fail"):
        raise InvalidConfigError("on_corrupt must be 'skip' or 'fail'")
    root = Path(root)
    if not root.is_dir():
        raise InvalidConfigError(f"dataset directory {root} does not exist")
    split_dirs = [root / s for s in SPLITS if (root / s).is_dir()]
    if not split_dirs:
        raise InvalidConfigError(f"{root} has no train/val/test subdirectories")
    classes = sorted({p.name for s in split_dirs for p in s.iterdir() if p.is_dir()})
    meta = root / "dataset.json"
    if meta.exists():
        # keep the label order of a dataset written by write_image_folder
        recorded = list(json.loads(meta.read_text()).get("class_names") or [])
        if set(recorded) >= set(classes):
            classes = recorded
    images, labels, ids = {}, {}, {}
    for sdir in split_dirs:
        im, lb, idx = [], [], []
        for label, cname in enumerate(classes):
            cdir = sdir / cname
            if not cdir.is_dir():
                continue
            for f in sorted(cdir.iterdir()):
                try:
                    with Image.open(f) as raw:
                        arr = np.asarray(_resize_center_crop(raw.convert("RGB"), resolution))
                except (UnidentifiedImageError, OSError) as exc:
                    if on_corrupt == "fail":
                        raise InvalidInputError(f"corrupt image {f}: {exc}") from exc
                    log.warning("skipping corrupt image %s: %s", f, exc)
                    continue
                im.append(arr)
                lb.append(label)
                idx.append(f"{sdir.name}/{cname}/{f.stem}")
        if im:
            images[sdir.name] = normalize(np.stack(im)).permute(0, 3, 1, 2).contiguous()
            labels[sdir.name] = torch.tensor(lb, dtype=torch.long)
            ids[sdir.name] = idx
    spec = DatasetSpec(name=name or root.name, num_classes=len(classes), resolution=resolution,
                       splits={s: len(v) for s, v in ids.items()}, source="local-directory",
                       class_names=tuple(classes), params={"root": str(root)})
    return ImageDataset(spec, images, labels, ids)


# ---------------------------------------------------------------- loading

def _augment(images: torch.Tensor, augmentation, res: int, gen: torch.Generator):
    out = images
    if "random_resized_crop" in augmentation:
        crops = []
        for img in out:
            scale = float(torch.empty(1).uniform_(0.5, 1.0, generator=gen))
            side = max(2, int(round(res * math.sqrt(scale))))
            top = int(torch.randint(0, res - side + 1, (1,), generator=gen))
            left = int(torch.randint(0, res - side + 1, (1,), generator=gen))
            patch = img[:, top:top + side, left:left + side][None]
            crops.append(torch.nn.functional.interpolate(
                patch, size=(res, res), mode="bilinear", align_corners=False)[0])
        out = torch.stack(crops)
    if "horizontal_flip" in augmentation:
        flip = torch.rand(out.shape[0], generator=gen) < 0.5
        out = torch.where(flip[:, None, None, None], out.flip(-1), out)
    # center_crop is applied at load time (images are already res x res)
    return out


def load_split(ds: ImageDataset, split: str, batch_size: int, augmentation=(),
               seed: int = 0, shuffle: bool | None = None) -> Iterator[LabeledBatch]:
    """Yield batches in an order that is a pure function of ``seed``.

    The train split is shuffled and augmented; val/test are served in fixed
    order and any requested augmentation is dropped with a warning.
    """
    images, labels = ds.split(split)
    if batch_size < 1:
        raise InvalidInputError("batch_size must be positive")
    augmentation = tuple(augmentation)
    unknown = set(augmentation) - set(AUGMENTATIONS)
    if unknown:
        raise InvalidConfigError(f"unknown augmentation(s) {sorted(unknown)}")
    train = split == "train"
    if not train and set(augmentation) - {"center_crop"}:
        warnings.warn(f"augmentation {augmentation} ignored for evaluation split {split!r}",
                      stacklevel=2)
        augmentation = ()
    gen = torch.Generator().manual_seed(int(seed))
    shuffle = train if shuffle is None else shuffle
    order = torch.randperm(len(labels), generator=gen) if shuffle else torch.arange(len(labels))
    ids = ds.ids[split]
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        batch = images[idx]
        if augmentation:
            batch = _augment(batch, augmentation, ds.spec.resolution, gen)
        yield LabeledBatch(batch, labels[idx], [ids[i] for i in idx.tolist()])


# ---------------------------------------------------------------- registry

# Reference transfer datasets, listed for registry completeness only.
REFERENCE_SPECS = (
    ("aircraft", 100, 6667, 3333), ("cars", 196, 8144, 8041), ("cub", 200, 5994, 5794),
    ("dogs", 120, 12000, 8580), ("flowers", 102, 2040, 6149), ("nabirds", 555, 23929, 24633),
    ("imagenet", 1000, 1_300_000, 50_000), ("imagenet-50", 50, 64274, 2500),
)


def reference_registry(resolution: int = 256) -> list[DatasetSpec]:
    return [DatasetSpec(name=n, num_classes=k, resolution=resolution,
                        splits={"train": tr, "test": te}, source="local-directory")
            for n, k, tr, te in REFERENCE_SPECS]


def write_registry(specs: Sequence[DatasetSpec], path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump({"schema_version": 1, "datasets": [s.to_dict() for s in specs]}, fh, indent=2)


def read_registry(path: str | Path) -> list[DatasetSpec]:
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("schema_version") != 1:
        raise InvalidConfigError(f"unsupported registry schema {blob.get('schema_version')!r}")
    return [DatasetSpec.from_dict(d) for d in blob["datasets"]]
