"""Seeded synthetic ultrasound-like dataset: one bright-rimmed ellipse over a
speckled background, with exact analytic masks.

Per-sample generators are seeded independently from the master seed via
``numpy.random.SeedSequence(seed, spawn_key=(index,))``, so generation order
(or parallel generation) cannot change any sample. Images are quantized to
the 8-bit grid at generation time, which makes the PGM round trip exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .pool import SamplePool

SMALL_AXES = (4.0, 9.0)    # semi-axes in px, first-trimester stand-in
LARGE_AXES = (10.0, 22.0)
FG_FRACTION_RANGE = (0.02, 0.45)
SPECKLE_GAIN = 0.3


@dataclass
class EllipseMeta:
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    scale: str  # small | large


@dataclass
class SynthSample:
    id: int
    image: np.ndarray  # (1, S, S) float64 in [0, 1], 8-bit quantized
    mask: np.ndarray   # (2, S, S) one-hot {background, head}
    meta: EllipseMeta


@dataclass
class SplitSpec:
    n_train: int
    n_val: int
    n_test: int
    init_labeled_fraction: float
    seed: int

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split sizes must all be >= 1")
        if not 0 < self.init_labeled_fraction <= 1:
            raise ConfigError(
                f"init_labeled_fraction must be in (0, 1], got {self.init_labeled_fraction}")


def sample_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent per-sample stream; depends only on (master_seed, index)."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))


def ellipse_interior(size: int, meta: EllipseMeta) -> np.ndarray:
    """Boolean membership of each pixel center in the ellipse."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xs - meta.cx
    dy = ys - meta.cy
    ct, st = np.cos(meta.theta), np.sin(meta.theta)
    u = (dx * ct + dy * st) / meta.a
    v = (-dx * st + dy * ct) / meta.b
    return u * u + v * v <= 1.0


def _render(size: int, meta: EllipseMeta, rng: np.random.Generator
            ) -> Tuple[np.ndarray, np.ndarray]:
    inside = ellipse_interior(size, meta)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xs - meta.cx
    dy = ys - meta.cy
    ct, st = np.cos(meta.theta), np.sin(meta.theta)
    u = (dx * ct + dy * st) / meta.a
    v = (-dx * st + dy * ct) / meta.b
    q = np.sqrt(u * u + v * v)

    # wide appearance ranges on purpose: a handful of labels cannot cover the
    # contrast x brightness x geometry modes, which is what the unlabeled
    # pool is for
    bg = rng.uniform(0.10, 0.35)
    tissue = bg + rng.uniform(0.04, 0.22)
    rim_amp = rng.uniform(0.10, 0.35)
    rim_width = rng.uniform(0.04, 0.12)

    base = np.where(inside, tissue, bg)
    rim = rim_amp * np.exp(-((q - 1.0) / rim_width) ** 2)
    speckle = base * rng.uniform(-1.0, 1.0, size=(size, size)) * SPECKLE_GAIN
    img = np.clip(base + rim + speckle, 0.0, 1.0)
    img = np.round(img * 255.0) / 255.0  # commit to the 8-bit storage grid
    mask = np.stack([~inside, inside]).astype(np.float64)
    return img[None], mask


def generate_one(index: int, master_seed: int, size: int = 64) -> SynthSample:
    rng = sample_rng(master_seed, index)
    scale = "small" if index % 2 == 0 else "large"
    lo, hi = SMALL_AXES if scale == "small" else LARGE_AXES
    # semi-axis ranges are stated at the reference 64 px resolution
    lo, hi = max(2.0, lo * size / 64.0), max(3.0, hi * size / 64.0)
    for _ in range(200):
        meta = EllipseMeta(
            cx=rng.uniform(0.25, 0.75) * size,
            cy=rng.uniform(0.25, 0.75) * size,
            a=rng.uniform(lo, hi),
            b=rng.uniform(lo, hi),
            theta=rng.uniform(0.0, np.pi),
            scale=scale,
        )
        frac = ellipse_interior(size, meta).mean()
        if FG_FRACTION_RANGE[0] <= frac <= FG_FRACTION_RANGE[1]:
            break
    else:
        raise DataError(f"sample {index}: no admissible ellipse in 200 draws")
    image, mask = _render(size, meta, rng)
    return SynthSample(id=index, image=image, mask=mask, meta=meta)


def generate(n: int, seed: int, size: int = 64) -> List[SynthSample]:
    """n samples, deterministic under seed, half small / half large ellipses."""
    if n < 1:
        raise ConfigError(f"generate: n must be >= 1, got {n}")
    return [generate_one(i, seed, size) for i in range(n)]


# ---------------------------------------------------------------------------
# splitting


def split(samples: Sequence[SynthSample], spec: SplitSpec) -> SamplePool:
    """Disjoint train/val/test id split plus the initial random labeled set."""
    total = spec.n_train + spec.n_val + spec.n_test
    if total > len(samples):
        raise ConfigError(
            f"split: {total} requested from {len(samples)} samples")
    rng = np.random.default_rng(spec.seed)
    ids = np.array([s.id for s in samples])
    perm = rng.permutation(len(ids))
    train = sorted(ids[perm[:spec.n_train]].tolist())
    val = sorted(ids[perm[spec.n_train:spec.n_train + spec.n_val]].tolist())
    test = sorted(ids[perm[spec.n_train + spec.n_val:total]].tolist())
    n_labeled = max(1, round(spec.init_labeled_fraction * spec.n_train))
    labeled = sorted(rng.choice(train, size=n_labeled, replace=False).tolist())
    labeled_set = set(labeled)
    unlabeled = [i for i in train if i not in labeled_set]
    return SamplePool(labeled_ids=labeled, unlabeled_ids=unlabeled,
                      val_ids=val, test_ids=test)


# ---------------------------------------------------------------------------
# augmentation (labeled training samples only; enforced at the call site)


def augment(sample: SynthSample, flip: bool, angle_deg: float,
            gain: float) -> SynthSample:
    """Deterministic transform: horizontal flip, rotation (bilinear image,
    nearest mask, zero fill), intensity gain clamped to [0, 1]. The mask is
    re-one-hot-ed after the shared geometric transform."""
    img = sample.image[0]
    cls = sample.mask[1]  # foreground channel as the class map
    if flip:
        img = img[:, ::-1]
        cls = cls[:, ::-1]
    if angle_deg != 0.0:
        img = ndimage.rotate(img, angle_deg, reshape=False, order=1,
                             mode="constant", cval=0.0)
        cls = ndimage.rotate(cls, angle_deg, reshape=False, order=0,
                             mode="constant", cval=0.0)
    img = np.clip(img * gain, 0.0, 1.0)
    fg = cls > 0.5
    mask = np.stack([~fg, fg]).astype(np.float64)
    return SynthSample(id=sample.id, image=np.ascontiguousarray(img)[None],
                       mask=mask, meta=sample.meta)


def augment_random(sample: SynthSample, rng: np.random.Generator) -> SynthSample:
    return augment(
        sample,
        flip=bool(rng.random() < 0.5),
        angle_deg=float(rng.uniform(-15.0, 15.0)),
        gain=float(rng.uniform(0.9, 1.1)),
    )


# ---------------------------------------------------------------------------
# on-disk dataset: manifest.json + 8-bit binary graymaps


def write_pgm(path: Path, gray: np.ndarray) -> None:
    """P5 binary graymap, maxval 255; input is (S, S) float in [0, 1]."""
    data = np.round(np.clip(gray, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise DataError(f"{path}: not a binary PGM")
        dims = f.readline().split()
        maxval = int(f.readline())
        if maxval != 255:
            raise DataError(f"{path}: expected maxval 255, got {maxval}")
        w, h = int(dims[0]), int(dims[1])
        raw = f.read(w * h)
        if len(raw) != w * h:
            raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def save_dataset(samples: Sequence[SynthSample], outdir: Union[str, Path],
                 seed: int, size: int) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": 1,
        "seed": seed,
        "n": len(samples),
        "size": size,
        "splits": None,  # runs record their own split in config/history
        "samples": [
            {
                "id": s.id, "cx": s.meta.cx, "cy": s.meta.cy, "a": s.meta.a,
                "b": s.meta.b, "theta": s.meta.theta, "scale": s.meta.scale,
            }
            for s in samples
        ],
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    for s in samples:
        write_pgm(out / f"img_{s.id}.pgm", s.image[0])
        write_pgm(out / f"msk_{s.id}.pgm", s.mask[1])


def load_dataset(indir: Union[str, Path]) -> Tuple[List[SynthSample], Dict]:
    src = Path(indir)
    with open(src / "manifest.json") as f:
        manifest = json.load(f)
    samples = []
    for entry in manifest["samples"]:
        sid = entry["id"]
        img = read_pgm(src / f"img_{sid}.pgm")
        fg = read_pgm(src / f"msk_{sid}.pgm") > 0.5
        mask = np.stack([~fg, fg]).astype(np.float64)
        meta = EllipseMeta(cx=entry["cx"], cy=entry["cy"], a=entry["a"],
                           b=entry["b"], theta=entry["theta"], scale=entry["scale"])
        samples.append(SynthSample(id=sid, image=img[None], mask=mask, meta=meta))
    return samples, manifest
