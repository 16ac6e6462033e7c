"""Synthetic lesion-on-texture dataset with controllable appearance shifts.

Clean samples are a textured background plus one blobby foreground region
(radial wobble around a random center). Shifts perturb only the image:
contrast squeeze, blur, additive noise, partial inversion, or a combo of
contrast plus noise. Masks are never touched by a shift.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .prompts import BoxXYXY, Point2D

SHIFT_KINDS = ("contrast", "blur", "noise", "invert", "combo")

AREA_FRACTION_MIN = 0.02
AREA_FRACTION_MAX = 0.40

# shift strengths at severity 1; the combo (contrast then noise) is calibrated
# so a box-prompted toy model loses roughly 0.1 Dice at full severity
CONTRAST_SQUEEZE = 0.30  # fraction of contrast removed
BLUR_SIGMA = 1.2
NOISE_STD = 0.25
INVERT_ALPHA = 0.35


@dataclass
class Sample:
    image: torch.Tensor  # (3, S, S) float32 in [0, 1]
    mask: torch.Tensor  # (S, S) uint8 in {0, 1}
    sample_id: str
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "combo"
    severity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must be in [0, 1]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "severity": self.severity, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        return cls(**d)


def _blob_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """One wobbly-disc mask with area fraction inside the accepted band."""
    for _ in range(64):
        r0 = rng.uniform(0.10, 0.28) * size
        margin = 1.35 * r0
        cx = rng.uniform(margin, size - margin)
        cy = rng.uniform(margin, size - margin)
        yy, xx = np.mgrid[0:size, 0:size]
        theta = np.arctan2(yy - cy, xx - cx)
        wobble = np.zeros_like(theta)
        for k in (2, 3, 4):
            wobble += rng.uniform(0.0, 0.15) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
        r_theta = r0 * (1.0 + wobble)
        mask = np.hypot(xx - cx, yy - cy) <= r_theta
        frac = mask.mean()
        if AREA_FRACTION_MIN <= frac <= AREA_FRACTION_MAX:
            return mask.astype(np.uint8)
    raise RuntimeError("failed to draw a mask inside the area band after 64 tries")


def _render_clean(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    mask = _blob_mask(rng, size)
    base = rng.uniform(0.25, 0.60)
    tex = gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 3.0)
    tex = tex / (np.abs(tex).max() + 1e-8) * 0.06
    tint = rng.uniform(-0.03, 0.03, size=3)

    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    offset = sign * rng.uniform(0.25, 0.45)
    inner_tex = gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 1.5)
    inner_tex = inner_tex / (np.abs(inner_tex).max() + 1e-8) * 0.04
    alpha = np.clip(gaussian_filter(mask.astype(np.float64), 1.0), 0.0, 1.0)

    img = np.empty((3, size, size))
    for c in range(3):
        bg = base + tint[c] + tex
        fg = bg + offset + inner_tex
        img[c] = (1.0 - alpha) * bg + alpha * fg
    return np.clip(img, 0.0, 1.0), mask


def gen_clean(n: int, size: int = 64, seed: int = 0, prefix: str = "sample") -> list[Sample]:
    """Generate n clean samples with one foreground blob each."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img, mask = _render_clean(rng, size)
        out.append(
            Sample(
                image=torch.from_numpy(img).to(torch.float32),
                mask=torch.from_numpy(mask),
                sample_id=f"{prefix}-{i:04d}",
                meta={"seed": seed, "index": i, "shift": "none"},
            )
        )
    return out


def _shift_one(sample: Sample, spec: ShiftSpec, rng: np.random.Generator) -> Sample:
    img = sample.image.numpy().astype(np.float64)
    sev = spec.severity

    def squeeze(a):
        return 0.5 + (a - 0.5) * (1.0 - CONTRAST_SQUEEZE * sev)

    def add_noise(a):
        return a + rng.normal(0.0, NOISE_STD * sev, a.shape)

    if spec.kind == "contrast":
        img = squeeze(img)
    elif spec.kind == "blur":
        img = np.stack([gaussian_filter(ch, BLUR_SIGMA * sev) for ch in img])
    elif spec.kind == "noise":
        img = add_noise(img)
    elif spec.kind == "invert":
        a = INVERT_ALPHA * sev
        img = (1.0 - a) * img + a * (1.0 - img)
    elif spec.kind == "combo":
        img = add_noise(squeeze(img))
    img = np.clip(img, 0.0, 1.0)

    meta = dict(sample.meta)
    meta["shift"] = spec.kind
    meta["shift_severity"] = sev
    return Sample(
        image=torch.from_numpy(img).to(torch.float32),
        mask=sample.mask.clone(),
        sample_id=sample.sample_id,
        meta=meta,
    )


def apply_shift(samples: list[Sample], spec: ShiftSpec) -> list[Sample]:
    """Shifted copies of the samples; masks are passed through untouched.

    Noise draws are keyed on (spec.seed, position) so each sample gets an
    independent but reproducible corruption.
    """
    return [
        _shift_one(s, spec, np.random.default_rng([spec.seed, i]))
        for i, s in enumerate(samples)
    ]


def minimal_box(mask: np.ndarray) -> BoxXYXY:
    """Tightest half-open box around the foreground of a binary mask."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2d")
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("mask has no foreground; no box exists")
    return BoxXYXY(
        x0=float(cols.min()),
        y0=float(rows.min()),
        x1=float(cols.max() + 1),
        y1=float(rows.max() + 1),
    )


def sample_point(mask: np.ndarray, seed: int = 0) -> Point2D:
    """Uniformly random foreground pixel center."""
    mask = np.asarray(mask)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("mask has no foreground; no point exists")
    i = int(np.random.default_rng(seed).integers(rows.size))
    return Point2D(x=float(cols[i]) + 0.5, y=float(rows[i]) + 0.5)


@dataclass
class Benchmark:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    shift: ShiftSpec
    seed: int
    image_size: int


def build_benchmark(
    seed: int = 0,
    n_train: int = 200,
    n_val: int = 50,
    n_test: int = 100,
    size: int = 64,
    shift: ShiftSpec | None = None,
) -> Benchmark:
    """Clean train/val splits plus a shifted test split."""
    shift = shift if shift is not None else ShiftSpec(seed=seed + 30_000)
    train = gen_clean(n_train, size, seed, prefix="train")
    val = gen_clean(n_val, size, seed + 10_000, prefix="val")
    test_clean = gen_clean(n_test, size, seed + 20_000, prefix="test")
    test = apply_shift(test_clean, shift)
    return Benchmark(train=train, val=val, test=test, shift=shift, seed=seed, image_size=size)


# -- folder round trip -------------------------------------------------------


def write_dataset(samples: list[Sample], root, extra_meta: dict | None = None) -> None:
    """Write images/*.png, masks/*.png and a manifest.json under root."""
    from pathlib import Path

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    ids = []
    for s in samples:
        arr = np.clip(np.rint(s.image.numpy() * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(root / "images" / f"{s.sample_id}.png")
        m = (s.mask.numpy().astype(np.uint8) * 255).astype(np.uint8)
        Image.fromarray(m, mode="L").save(root / "masks" / f"{s.sample_id}.png")
        ids.append(s.sample_id)
    manifest = {
        "format_version": 1,
        "count": len(samples),
        "image_size": int(samples[0].image.shape[-1]) if samples else None,
        "ids": ids,
    }
    if extra_meta:
        manifest.update(extra_meta)
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_folder(images_dir, masks_dir, size: int | None = None) -> list[Sample]:
    """Load stem-matched image/mask PNG pairs; masks binarize at 127.

    Pairs come back name-sorted. Stems present on one side only are an error;
    two empty directories yield an empty list.
    """
    from pathlib import Path

    img_dir = Path(images_dir)
    mask_dir = Path(masks_dir)
    if not img_dir.is_dir():
        raise FileNotFoundError(f"missing images directory: {img_dir}")
    if not mask_dir.is_dir():
        raise FileNotFoundError(f"missing masks directory: {mask_dir}")
    img_stems = {p.stem: p for p in img_dir.glob("*.png")}
    mask_stems = {p.stem: p for p in mask_dir.glob("*.png")}
    unmatched = sorted(set(img_stems) ^ set(mask_stems))
    if unmatched:
        raise ValueError(f"unmatched image/mask stems: {unmatched}")
    out = []
    for stem in sorted(img_stems):
        img = Image.open(img_stems[stem]).convert("RGB")
        msk = Image.open(mask_stems[stem]).convert("L")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
            msk = msk.resize((size, size), Image.NEAREST)
        arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
        marr = (np.asarray(msk) > 127).astype(np.uint8)
        out.append(
            Sample(
                image=torch.from_numpy(arr.copy()),
                mask=torch.from_numpy(marr),
                sample_id=stem,
                meta={"source": str(img_dir.parent)},
            )
        )
    return out
