"""Synthetic three-task scenes, image corruptions, and the on-disk corpus.

Every generator is a pure function of ``(image, parameters, seed)`` and acts
on pixels only; labels travel with the sample untouched.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import _kernels
from .errors import ValidationError
from .serialize import read_array, write_array

IMAGE_SIZE = 64
NUM_SEG_CLASSES = 5
NORMAL_BAND = 3.0


class PerturbationKind(IntEnum):
    CLEAN = 0
    SNOW = 1
    RAIN = 2
    FOG = 3
    NOISE = 4
    BLUR = 5

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "PerturbationKind":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValidationError(f"unknown perturbation kind {value!r}") from None


ALL_KINDS = tuple(PerturbationKind)
NUM_KINDS = len(ALL_KINDS)

# Per-level parameters. Level 0 is the identity for every kind.
SEVERITY = {
    PerturbationKind.NOISE: {1: {"sigma": 0.04}, 2: {"sigma": 0.08}, 3: {"sigma": 0.12}},
    PerturbationKind.BLUR: {1: {"size": 3}, 2: {"size": 5}, 3: {"size": 7}},
    PerturbationKind.RAIN: {
        1: {"drop_size": 6, "density": 0.006},
        2: {"drop_size": 8, "density": 0.010},
        3: {"drop_size": 10, "density": 0.014},
    },
    PerturbationKind.SNOW: {
        1: {"flake_size": 1.0, "density": 0.006},
        2: {"flake_size": 1.5, "density": 0.009},
        3: {"flake_size": 2.0, "density": 0.012},
    },
    PerturbationKind.FOG: {1: {"intensity": 0.3}, 2: {"intensity": 0.5}, 3: {"intensity": 0.7}},
}


@dataclass(frozen=True)
class ImageSample:
    id: str
    pixels: np.ndarray  # (3, H, W) float32 in [0, 1]
    seg: np.ndarray  # (H, W) int64 class ids
    saliency: np.ndarray  # (H, W) int64 {0, 1}
    normals: np.ndarray  # (2, H, W) float32, zero outside the boundary band
    kind: PerturbationKind = PerturbationKind.CLEAN
    severity: int = 0


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def derive_seed(root: int, *names) -> int:
    """Stable 63-bit sub-seed for a named stream (e.g. ``derive_seed(7, "corpus", "rain", "000012")``)."""
    h = hashlib.sha256(repr((int(root),) + tuple(str(n) for n in names)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def _pixels(img) -> np.ndarray:
    arr = img.pixels if isinstance(img, ImageSample) else img
    return np.asarray(arr, dtype=np.float32)


def _wrap(img, out: np.ndarray, kind: PerturbationKind, severity: int):
    if isinstance(img, ImageSample):
        return replace(img, pixels=out, kind=kind, severity=severity)
    return out


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def gaussian_noise(img, sigma: float, seed=None):
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    x = _pixels(img)
    if sigma == 0:
        return _wrap(img, x.copy(), PerturbationKind.NOISE, 0)
    noise = _rng(seed).normal(0.0, sigma, size=x.shape)
    out = np.clip(x + noise, 0.0, 1.0).astype(np.float32)
    return _wrap(img, out, PerturbationKind.NOISE, 0)


def blur_kernel(kind: str, size: int, angle: float = 0.0) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValidationError(f"blur kernel size must be odd and >= 1, got {size}")
    if not 0.0 <= angle < 180.0:
        raise ValidationError(f"motion angle must lie in [0, 180), got {angle}")
    c = size // 2
    if kind == "average":
        k = np.ones((size, size))
    elif kind == "gaussian":
        sigma = max(size / 4.0, 0.5)
        ax = np.arange(size) - c
        g = np.exp(-(ax**2) / (2 * sigma**2))
        k = np.outer(g, g)
    elif kind == "motion":
        k = np.zeros((size, size))
        theta = np.deg2rad(angle)
        for t in np.linspace(-c, c, 4 * size + 1):
            k[int(round(c - t * np.sin(theta))), int(round(c + t * np.cos(theta)))] = 1.0
    else:
        raise ValidationError(f"unknown blur kind {kind!r}")
    return k / k.sum()


def blur(img, kind: str = "gaussian", size: int = 3, angle: float = 0.0, seed=None):
    """Reflect-padded per-channel correlation with a normalized kernel."""
    k = blur_kernel(kind, size, angle)
    x = _pixels(img)
    if size == 1:
        return _wrap(img, x.copy(), PerturbationKind.BLUR, 0)
    out = np.stack([ndimage.correlate(ch.astype(np.float64), k, mode="reflect") for ch in x])
    return _wrap(img, np.clip(out, 0.0, 1.0).astype(np.float32), PerturbationKind.BLUR, 0)


def _check_unit(name: str, value: float):
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")


def rain_mask(h: int, w: int, drop_size: int, density: float, seed=None) -> np.ndarray:
    """Coverage of ``round(density*h*w)`` slanted streaks of ``drop_size`` pixels."""
    _check_unit("density", density)
    n = int(round(density * h * w))
    rng = _rng(seed)
    x0 = rng.uniform(0, w, n)
    y0 = rng.uniform(0, h, n)
    angles = np.deg2rad(rng.uniform(60.0, 80.0, n))
    return _kernels.raster_segments(h, w, x0, y0, angles, int(drop_size))


def rain(img, drop_size: int = 8, density: float = 0.01, seed=None, brightness: float = 0.9, alpha: float = 0.6):
    _check_unit("density", density)
    x = _pixels(img)
    if density == 0:
        return _wrap(img, x.copy(), PerturbationKind.RAIN, 0)
    m = rain_mask(x.shape[1], x.shape[2], drop_size, density, seed).astype(np.float32) * alpha
    out = x * (1.0 - m) + brightness * m
    return _wrap(img, np.clip(out, 0.0, 1.0).astype(np.float32), PerturbationKind.RAIN, 0)


def snow_mask(h: int, w: int, flake_size: float, density: float, seed=None) -> np.ndarray:
    _check_unit("density", density)
    n = int(round(density * h * w))
    rng = _rng(seed)
    return _kernels.raster_disks(h, w, rng.uniform(0, w, n), rng.uniform(0, h, n), float(flake_size))


def snow(img, flake_size: float = 1.5, density: float = 0.01, seed=None, level: int = 1, alpha: float = 0.85):
    """White disks plus a global ``0.05*level`` lift; no flakes means no lift."""
    _check_unit("density", density)
    x = _pixels(img)
    if density == 0:
        return _wrap(img, x.copy(), PerturbationKind.SNOW, 0)
    m = snow_mask(x.shape[1], x.shape[2], flake_size, density, seed).astype(np.float32) * alpha
    lifted = np.clip(x + 0.05 * level, 0.0, 1.0)
    out = lifted * (1.0 - m) + m
    return _wrap(img, np.clip(out, 0.0, 1.0).astype(np.float32), PerturbationKind.SNOW, 0)


def value_noise(h: int, w: int, cells: int = 4, seed=None) -> np.ndarray:
    """Smooth noise in [0, 1]: random lattice values, bilinearly interpolated."""
    grid = _rng(seed).uniform(0.0, 1.0, (cells + 1, cells + 1))
    return ndimage.zoom(grid, (h / (cells + 1), w / (cells + 1)), order=1, mode="nearest")[:h, :w]


def fog(img, intensity: float = 0.5, seed=None):
    _check_unit("intensity", intensity)
    x = _pixels(img)
    if intensity == 0:
        return _wrap(img, x.copy(), PerturbationKind.FOG, 0)
    mask = 0.5 + 0.5 * value_noise(x.shape[1], x.shape[2], seed=seed)
    t = (intensity * mask)[None].astype(np.float32)
    out = x * (1.0 - t) + t
    return _wrap(img, np.clip(out, 0.0, 1.0).astype(np.float32), PerturbationKind.FOG, 0)


def apply_perturbation(sample: ImageSample, kind, level: int, seed) -> ImageSample:
    """Corrupt ``sample`` with ``kind`` at ``level`` (0 = identity)."""
    kind = PerturbationKind.parse(kind)
    if kind is PerturbationKind.CLEAN or level == 0:
        return replace(sample, pixels=sample.pixels.copy(), kind=kind, severity=0)
    if level not in (1, 2, 3):
        raise ValidationError(f"severity level must be 0..3, got {level}")
    p = SEVERITY[kind][level]
    x = sample.pixels
    if kind is PerturbationKind.NOISE:
        out = gaussian_noise(x, p["sigma"], seed)
    elif kind is PerturbationKind.BLUR:
        rng = _rng(seed)
        style = ("gaussian", "average", "motion")[int(rng.integers(3))]
        out = blur(x, style, p["size"], float(rng.uniform(0.0, 180.0)))
    elif kind is PerturbationKind.RAIN:
        out = rain(x, p["drop_size"], p["density"], seed)
    elif kind is PerturbationKind.SNOW:
        out = snow(x, p["flake_size"], p["density"], seed, level=level)
    else:
        out = fog(x, p["intensity"], seed)
    return replace(sample, pixels=out, kind=kind, severity=level)


def compose(sample: ImageSample, steps: Sequence[tuple], seed) -> ImageSample:
    """Apply several corruptions in order, e.g. rain then fog for mixed sets."""
    out = sample
    for i, (kind, level) in enumerate(steps):
        out = apply_perturbation(out, kind, level, derive_seed(seed, "compose", i))
    return replace(out, kind=PerturbationKind.parse(steps[0][0]), severity=steps[0][1])


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def _shape_mask(kind: int, cy: float, cx: float, r: float, rot: float, yy, xx) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(rot), np.sin(rot)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == 1:  # disk
        return dx * dx + dy * dy <= r * r
    if kind == 2:  # rotated square
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if kind == 3:  # triangle
        pts = [(r * np.cos(rot + a), r * np.sin(rot + a)) for a in (np.pi / 2, np.pi / 2 + 2.094, np.pi / 2 + 4.189)]
        inside = np.ones_like(dx, dtype=bool)
        for i in range(3):
            (x1, y1), (x2, y2) = pts[i], pts[(i + 1) % 3]
            cross = (x2 - x1) * (dy - y1) - (y2 - y1) * (dx - x1)
            inside &= cross >= 0
        return inside
    # ring
    d2 = dx * dx + dy * dy
    return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)


def boundary_normals(fg: np.ndarray, band: float = NORMAL_BAND) -> np.ndarray:
    """Unit normal of the nearest foreground boundary, zero outside ``band`` pixels."""
    h, w = fg.shape
    out = np.zeros((2, h, w), dtype=np.float32)
    if fg.all() or not fg.any():
        return out
    sdf = ndimage.distance_transform_edt(~fg) - ndimage.distance_transform_edt(fg)
    gy, gx = np.gradient(sdf)
    norm = np.hypot(gx, gy)
    valid = (np.abs(sdf) <= band) & (norm > 1e-6)
    nx = np.where(valid, gx / np.where(norm > 0, norm, 1.0), 0.0)
    ny = np.where(valid, gy / np.where(norm > 0, norm, 1.0), 0.0)
    out[0], out[1] = nx, ny
    return out


def render_scene(seed, size: int = IMAGE_SIZE, sample_id: str = "") -> ImageSample:
    rng = _rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(0.2, 0.7, 3)
    tex = 0.5 * value_noise(size, size, cells=4, seed=rng.integers(2**31)) + 0.5 * value_noise(
        size, size, cells=12, seed=rng.integers(2**31)
    )
    freq, phase, theta = rng.uniform(0.3, 0.8), rng.uniform(0, 2 * np.pi), rng.uniform(0, np.pi)
    stripes = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    img = base[:, None, None] + 0.18 * (tex - 0.5)[None] + 0.06 * stripes[None]
    seg = np.zeros((size, size), dtype=np.int64)
    for _ in range(int(rng.integers(1, 5))):
        kind = int(rng.integers(1, NUM_SEG_CLASSES))
        r = rng.uniform(7, 14)
        cy, cx = rng.uniform(r * 0.6, size - r * 0.6, 2)
        mask = _shape_mask(kind, cy, cx, r, rng.uniform(0, 2 * np.pi), yy, xx)
        color = rng.uniform(0.0, 1.0, 3)
        color[int(rng.integers(3))] = rng.choice([0.05, 0.95])
        shade = 1.0 + 0.15 * ((xx - cx) / size)
        img[:, mask] = (color[:, None] * shade[mask][None])
        seg[mask] = kind
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    sal = (seg != 0).astype(np.int64)
    return ImageSample(sample_id, pixels, seg, sal, boundary_normals(seg != 0))


def synth_base(seed: int, count: int, size: int = IMAGE_SIZE) -> list[ImageSample]:
    if count <= 0:
        raise ValidationError(f"count must be positive, got {count}")
    return [render_scene(derive_seed(seed, "scene", i), size, f"{i:06d}") for i in range(count)]


# ---------------------------------------------------------------------------
# corpus on disk
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


def assign_splits(ids: Sequence[str], seed: int, fractions=(0.70, 0.15, 0.15)) -> dict[str, str]:
    """Rank ids by a keyed hash, then cut at the cumulative fractions."""
    order = sorted(ids, key=lambda i: hashlib.sha256(f"{seed}:{i}".encode()).hexdigest())
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    out = {}
    for pos, i in enumerate(order):
        out[i] = "train" if pos < n_train else ("val" if pos < n_train + n_val else "test")
    return out


def encode_labels(sample: ImageSample) -> np.ndarray:
    return np.concatenate(
        [sample.seg[None].astype(np.float32), sample.saliency[None].astype(np.float32), sample.normals], axis=0
    )


def decode_labels(arr: np.ndarray):
    return arr[0].astype(np.int64), arr[1].astype(np.int64), arr[2:4].astype(np.float32)


def build_corpus(
    root,
    count: int,
    seed: int,
    kinds: Iterable = ALL_KINDS,
    severities: Sequence[int] = (1, 2, 3),
    base_generator: Optional[Callable[[int, int], list[ImageSample]]] = None,
) -> dict:
    """Write the clean set plus one corrupted replica per kind; returns the manifest."""
    if count <= 0:
        raise ValidationError(f"count must be positive, got {count}")
    kinds = [PerturbationKind.parse(k) for k in kinds]
    base_generator = base_generator or synth_base
    root = Path(root)
    base = base_generator(derive_seed(seed, "scenes"), count)
    splits = assign_splits([s.id for s in base], seed)
    entries = []
    for kind in kinds:
        for split in SPLITS:
            (root / kind.label / split).mkdir(parents=True, exist_ok=True)
        for s in base:
            if kind is PerturbationKind.CLEAN:
                level = 0
            else:
                level = int(severities[derive_seed(seed, "severity", kind.label, s.id) % len(severities)])
            out = apply_perturbation(s, kind, level, derive_seed(seed, "perturb", kind.label, s.id))
            d = root / kind.label / splits[s.id]
            write_array(d / f"{s.id}.img", out.pixels)
            write_array(d / f"{s.id}.lbl", encode_labels(out))
            entries.append({"id": s.id, "kind": kind.label, "split": splits[s.id], "severity": level})
    manifest = {
        "format": "RMTL corpus v1",
        "seed": seed,
        "count": count,
        "image_size": int(base[0].pixels.shape[-1]),
        "kinds": [k.label for k in kinds],
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


@dataclass
class Split:
    """Stacked arrays for one (kind, split) slice of a corpus."""

    ids: list
    images: np.ndarray  # (N, 3, H, W)
    seg: np.ndarray  # (N, H, W)
    saliency: np.ndarray  # (N, H, W)
    normals: np.ndarray  # (N, 2, H, W)
    kinds: np.ndarray  # (N,) int

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split([self.ids[i] for i in idx], self.images[idx], self.seg[idx], self.saliency[idx],
                     self.normals[idx], self.kinds[idx])

    @staticmethod
    def concat(parts: Sequence["Split"]) -> "Split":
        return Split(
            [i for p in parts for i in p.ids],
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.seg for p in parts]),
            np.concatenate([p.saliency for p in parts]),
            np.concatenate([p.normals for p in parts]),
            np.concatenate([p.kinds for p in parts]),
        )

    @staticmethod
    def from_samples(samples: Sequence[ImageSample]) -> "Split":
        return Split(
            [s.id for s in samples],
            np.stack([s.pixels for s in samples]),
            np.stack([s.seg for s in samples]),
            np.stack([s.saliency for s in samples]),
            np.stack([s.normals for s in samples]),
            np.array([int(s.kind) for s in samples], dtype=np.int64),
        )

    def samples(self) -> list[ImageSample]:
        return [
            ImageSample(self.ids[i], self.images[i], self.seg[i], self.saliency[i], self.normals[i],
                        PerturbationKind(int(self.kinds[i])))
            for i in range(len(self))
        ]


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    return json.loads(path.read_text())


def load_split(root, kind, split: str) -> Split:
    kind = PerturbationKind.parse(kind)
    manifest = load_manifest(root)
    ids = sorted(e["id"] for e in manifest["samples"] if e["kind"] == kind.label and e["split"] == split)
    if not ids:
        raise ValidationError(f"corpus at {root} has no {kind.label}/{split} samples")
    d = Path(root) / kind.label / split
    images, seg, sal, nrm = [], [], [], []
    for i in ids:
        images.append(read_array(d / f"{i}.img"))
        s, a, n = decode_labels(read_array(d / f"{i}.lbl"))
        seg.append(s)
        sal.append(a)
        nrm.append(n)
    return Split(ids, np.stack(images), np.stack(seg), np.stack(sal), np.stack(nrm),
                 np.full(len(ids), int(kind), dtype=np.int64))


def mixed_split(clean: Split, seed: int, steps=((PerturbationKind.RAIN, 2), (PerturbationKind.FOG, 2))) -> Split:
    """Compose several corruptions (rain then fog by default) onto clean images."""
    out = [compose(s, steps, derive_seed(seed, "mixed", s.id)) for s in clean.samples()]
    return Split.from_samples(out)
