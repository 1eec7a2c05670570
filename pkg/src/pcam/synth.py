"""Synthetic foreground-mismatch benchmark generator.

Each sample is a parametric binary shape (one archetype per class) rendered
at a controlled foreground ratio over clutter noise, with ground-truth mask
and box.  Two domains with different per-class ratio distributions recreate
the foreground-size mismatch that breaks naive cross-domain attention.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractViolation, format_float, load_matrix, save_matrix, substream

SHAPE_KINDS = ("square", "cross", "diag", "ring")


@dataclass
class DomainSpec:
    domain: str
    n_classes: int
    shapes: tuple[str, ...]
    ratio_means: tuple[float, ...]
    ratio_jitter: float = 0.0
    clutter_density: float = 0.02
    clutter_intensity: float = 0.6
    noise_level: float = 0.15
    n_samples: int = 32
    image_side: int = 16
    channels: int = 1
    patch_side: int = 4   # clamp floor: shapes below one patch cell vanish at patch scale
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.n_samples < 1:
            raise ContractViolation("counts must be >= 1")
        if len(self.shapes) != self.n_classes or len(self.ratio_means) != self.n_classes:
            raise ContractViolation("per-class shape and ratio lists must match n_classes")
        for s in self.shapes:
            if s not in SHAPE_KINDS:
                raise ContractViolation(f"unknown shape archetype {s!r}")
        for r in self.ratio_means:
            if not 0.0 < r <= 1.0:
                raise ContractViolation("ratio means must lie in (0, 1]")


@dataclass
class ImageSample:
    pixels: np.ndarray        # H x W x C float64
    label: int
    domain: str
    mask: np.ndarray          # H x W bool, ground-truth foreground
    box: tuple[int, int, int, int]   # pixel-space (col_min, col_max, row_min, row_max), 0-indexed inclusive
    ratio: float
    clamped: bool = False     # requested ratio too small for one patch, clamped up

    def __post_init__(self):
        h, w = self.mask.shape
        got = float(self.mask.sum()) / (h * w)
        assert abs(got - self.ratio) < 1e-12, "realized ratio must equal mask pixel fraction"


def _shape_mask(kind: str, size: int) -> np.ndarray:
    """Binary template of the archetype on a size x size canvas.

    Geometry is tuned so the four archetypes stay distinguishable after
    patch-scale averaging: solid blob, full-span bars, thick diagonal band,
    thick hollow frame.
    """
    m = np.zeros((size, size), dtype=bool)
    if kind == "square":
        m[:, :] = True
    elif kind == "cross":
        bar = max(1, int(round(size / 3.0)))
        lo = (size - bar) // 2
        m[lo:lo + bar, :] = True
        m[:, lo:lo + bar] = True
    elif kind == "diag":
        half = max(1, int(round(size / 2.0))) // 2 + 1
        for r in range(size):
            lo = max(0, r - half)
            hi = min(size, r + half + 1)
            m[r, lo:hi] = True
    elif kind == "ring":
        t = max(1, int(round(size / 4.0)))
        m[:, :] = True
        if size > 2 * t:
            m[t:size - t, t:size - t] = False
    else:
        raise ContractViolation(f"unknown shape archetype {kind!r}")
    return m


def render_shape(kind: str, target_pixels: int, max_side: int) -> np.ndarray:
    """Smallest-error template whose pixel count best matches the target."""
    best, best_err = None, None
    for size in range(1, max_side + 1):
        m = _shape_mask(kind, size)
        err = abs(int(m.sum()) - target_pixels)
        if best_err is None or err < best_err:
            best, best_err = m, err
    return best


def generate_domain(spec: DomainSpec) -> list[ImageSample]:
    """Render the domain: class-balanced, deterministic per seed."""
    side = spec.image_side
    n_pix = side * side
    min_pixels = spec.patch_side * spec.patch_side
    samples = []
    for i in range(spec.n_samples):
        rng = substream(spec.seed, i)
        label = i % spec.n_classes
        ratio = spec.ratio_means[label]
        if spec.ratio_jitter > 0:
            ratio = ratio + rng.uniform(-spec.ratio_jitter, spec.ratio_jitter)
        ratio = min(1.0, max(ratio, 1.0 / n_pix))
        target = int(round(ratio * n_pix))
        clamped = False
        if target < min_pixels:
            target = min_pixels
            clamped = True
        shape = render_shape(spec.shapes[label], target, side)
        sh, sw = shape.shape
        r0 = int(rng.integers(0, side - sh + 1))
        c0 = int(rng.integers(0, side - sw + 1))
        mask = np.zeros((side, side), dtype=bool)
        mask[r0:r0 + sh, c0:c0 + sw] = shape

        img = rng.uniform(0.0, spec.noise_level, size=(side, side))
        n_dots = int(round(spec.clutter_density * n_pix))
        for _ in range(n_dots):
            rr = int(rng.integers(0, side))
            cc = int(rng.integers(0, side))
            img[rr, cc] = spec.clutter_intensity
        img[mask] = 1.0

        rows = np.where(mask.any(axis=1))[0]
        cols = np.where(mask.any(axis=0))[0]
        box = (int(cols[0]), int(cols[-1]), int(rows[0]), int(rows[-1]))
        pixels = np.repeat(img[:, :, None], spec.channels, axis=2)
        samples.append(ImageSample(
            pixels=pixels,
            label=label,
            domain=spec.domain,
            mask=mask,
            box=box,
            ratio=float(mask.sum()) / n_pix,
            clamped=clamped,
        ))
    return samples


def per_class_ratio_means(samples: list[ImageSample], n_classes: int) -> np.ndarray:
    means = np.zeros(n_classes)
    for k in range(n_classes):
        rs = [s.ratio for s in samples if s.label == k]
        means[k] = float(np.mean(rs)) if rs else np.nan
    return means


def mismatch_report(source: list[ImageSample], target: list[ImageSample],
                    n_classes: int, per_class_acc=None) -> dict:
    """Per-class foreground-ratio gap, optional accuracy, and their correlation."""
    src = per_class_ratio_means(source, n_classes)
    tgt = per_class_ratio_means(target, n_classes)
    gaps = np.abs(src - tgt)
    out = {"ratio_src": src, "ratio_tgt": tgt, "gap": gaps, "acc": None, "corr": None}
    if per_class_acc is not None:
        acc = np.asarray(per_class_acc, dtype=np.float64)
        out["acc"] = acc
        if np.std(gaps) > 0 and np.std(acc) > 0:
            out["corr"] = float(np.corrcoef(gaps, acc)[0, 1])
    return out


# ---------------------------------------------------------------------------
# On-disk dataset: manifest line per sample plus one matrix text file per
# channel; portable and diffable.


def save_dataset(out_dir: str, samples: list[ImageSample]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        stem = f"sample_{i:05d}"
        for c in range(s.pixels.shape[2]):
            save_matrix(os.path.join(out_dir, f"{stem}_c{c}.txt"), s.pixels[:, :, c])
        save_matrix(os.path.join(out_dir, f"{stem}_mask.txt"), s.mask.astype(np.float64))
        box = " ".join(str(v) for v in s.box)
        lines.append(f"{stem} {s.label} {s.domain} {format_float(s.ratio)} {box}\n")
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="ascii") as fh:
        fh.writelines(lines)


def load_dataset(in_dir: str) -> list[ImageSample]:
    samples = []
    with open(os.path.join(in_dir, "manifest.txt"), "r", encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            stem, label, domain, ratio = parts[0], int(parts[1]), parts[2], float(parts[3])
            box = tuple(int(v) for v in parts[4:8])
            channels = []
            c = 0
            while os.path.exists(os.path.join(in_dir, f"{stem}_c{c}.txt")):
                channels.append(load_matrix(os.path.join(in_dir, f"{stem}_c{c}.txt")))
                c += 1
            pixels = np.stack(channels, axis=2)
            mask = load_matrix(os.path.join(in_dir, f"{stem}_mask.txt")) > 0.5
            samples.append(ImageSample(pixels=pixels, label=label, domain=domain,
                                       mask=mask, box=box, ratio=ratio))
    return samples
