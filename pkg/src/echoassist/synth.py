"""Synthetic graded ultrasound-like frames.

Each view class gets a distinct geometric template drawn inside a scan
sector; controllable degradations (speckle, gain shift, sector occlusion)
produce frames across the whole quality scale so that training, grading,
and the real-time loop can be exercised without a physical scan.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import cv2
import numpy as np
from PIL import Image

from .data import (
    AcquisitionMetadata,
    DatasetManifest,
    GradeValue,
    ImageSample,
    ViewClass,
    stratified_split,
)

#: Grade = 10 * (w_completeness * completeness + w_clarity * clarity),
#: clamped to [1, 10] for real views. Equal weights by default.
GRADE_WEIGHTS = (0.5, 0.5)

# sector geometry, as fractions of the frame size
_APEX = (0.5, 0.02)
_FAN_HALF_ANGLE_DEG = 40.0
_FAN_RADIUS = 0.93
_BACKGROUND = 0.12


@dataclass(frozen=True)
class SynthConfig:
    """Parameters for one synthetic frame.

    completeness and clarity live in [0, 1] and drive the grade; the
    degradation strengths (speckle_sigma, occlusion_fraction) set how hard
    the worst frames get. RANDOM frames ignore completeness/clarity and are
    always grade 0.
    """

    view: ViewClass
    completeness: float = 1.0
    clarity: float = 1.0
    speckle_sigma: float = 0.0
    gain_shift: float = 0.0
    occlusion_fraction: float = 0.0
    seed: int = 0
    size: tuple[int, int] = (448, 448)

    def __post_init__(self):
        if not 0.0 <= self.completeness <= 1.0:
            raise ValueError(f"completeness {self.completeness} outside [0, 1]")
        if not 0.0 <= self.clarity <= 1.0:
            raise ValueError(f"clarity {self.clarity} outside [0, 1]")
        if self.speckle_sigma < 0:
            raise ValueError("speckle_sigma must be >= 0")
        if not 0.0 <= self.occlusion_fraction <= 1.0:
            raise ValueError(f"occlusion_fraction {self.occlusion_fraction} outside [0, 1]")
        if min(self.size) < 32:
            raise ValueError("size too small")


def grade_of(config: SynthConfig, weights: tuple[float, float] = GRADE_WEIGHTS) -> GradeValue:
    """Quality grade implied by a config: 0 for RANDOM, else the weighted
    completeness/clarity score on the 10-point scale, clamped to [1, 10]."""
    if config.view is ViewClass.RANDOM:
        return GradeValue(0.0)
    wc, wk = weights
    raw = 10.0 * (wc * config.completeness + wk * config.clarity)
    return GradeValue(float(min(max(raw, 1.0), 10.0)))


def _fan_mask(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    ax, ay = _APEX[0] * w, _APEX[1] * h
    dx, dy = xs - ax, ys - ay
    r = np.sqrt(dx * dx + dy * dy)
    ang = np.degrees(np.arctan2(dx, dy))  # 0 = straight down
    return (np.abs(ang) <= _FAN_HALF_ANGLE_DEG) & (r <= _FAN_RADIUS * h) & (r >= 0.06 * h)


def _four_chambers(img: np.ndarray, center: tuple[float, float], tilt_deg: float):
    """Bright myocardial mass with four dark chambers in a 2x2 layout."""
    h, w = img.shape
    cx, cy = center[0] * w, center[1] * h
    cv2.ellipse(img, ((cx, cy), (0.62 * w, 0.66 * h), tilt_deg), 0.80, -1)
    t = math.radians(tilt_deg)
    u = (math.cos(t), math.sin(t))      # chamber-row axis
    v = (-math.sin(t), math.cos(t))     # chamber-column axis
    offsets = [(-0.115, -0.105, 0.105, 0.125),  # (du, dv, ax, ay): LV biggest
               (0.115, -0.105, 0.085, 0.105),
               (-0.115, 0.115, 0.085, 0.085),
               (0.115, 0.115, 0.075, 0.085)]
    for du, dv, a, b in offsets:
        px = cx + (du * u[0] + dv * v[0]) * w
        py = cy + (du * u[1] + dv * v[1]) * h
        cv2.ellipse(img, ((px, py), (2 * a * w, 2 * b * h), tilt_deg), 0.06, -1)


def view_template(view: ViewClass, size: tuple[int, int] = (448, 448),
                  seed: int = 0) -> np.ndarray:
    """Clean template for a view, float32 in [0, 1]. RANDOM is a seeded
    uniform noise field; all other views are deterministic in the seed."""
    h, w = size
    if view is ViewClass.RANDOM:
        rng = np.random.default_rng(seed)
        return rng.uniform(0.0, 0.85, size=(h, w)).astype(np.float32)

    img = np.zeros((h, w), dtype=np.float32)
    mask = _fan_mask(h, w)
    img[mask] = _BACKGROUND

    if view is ViewClass.A4C:
        _four_chambers(img, (0.5, 0.52), 0.0)
    elif view is ViewClass.SC:
        _four_chambers(img, (0.55, 0.56), 42.0)
    elif view is ViewClass.PL:
        # long-axis: two elongated cavities stacked along a diagonal band
        cv2.ellipse(img, ((0.5 * w, 0.52 * h), (0.74 * w, 0.46 * h), -24.0), 0.78, -1)
        cv2.ellipse(img, ((0.40 * w, 0.58 * h), (0.38 * w, 0.17 * h), -24.0), 0.07, -1)
        cv2.ellipse(img, ((0.66 * w, 0.45 * h), (0.22 * w, 0.13 * h), -24.0), 0.07, -1)
        cv2.ellipse(img, ((0.62 * w, 0.60 * h), (0.15 * w, 0.11 * h), -24.0), 0.10, -1)
    elif view is ViewClass.PSAV:
        # short axis at the aortic valve: thick ring with a trileaflet star
        center = (int(0.5 * w), int(0.52 * h))
        cv2.circle(img, center, int(0.26 * h), 0.82, -1)
        cv2.circle(img, center, int(0.17 * h), 0.08, -1)
        for angle in (90.0, 210.0, 330.0):
            ex = center[0] + 0.16 * h * math.cos(math.radians(angle))
            ey = center[1] + 0.16 * h * math.sin(math.radians(angle))
            cv2.line(img, center, (int(ex), int(ey)), 0.7, max(2, h // 90))
    elif view is ViewClass.PSMV:
        # short axis at the mitral valve: ring with a bright leaflet bar
        center = (int(0.5 * w), int(0.52 * h))
        cv2.circle(img, center, int(0.28 * h), 0.80, -1)
        cv2.circle(img, center, int(0.19 * h), 0.07, -1)
        cv2.ellipse(img, ((0.5 * w, 0.52 * h), (0.30 * w, 0.055 * h), 0.0), 0.85, -1)
    else:
        raise ValueError(f"no template for {view}")

    img[~mask] = 0.0
    return img


def render_view(config: SynthConfig) -> ImageSample:
    """Render one frame: template, then speckle scaled by (1 - clarity),
    gain shift, and an apex-anchored occlusion wedge scaled by
    (1 - completeness). Deterministic in the seed."""
    h, w = config.size
    rng = np.random.default_rng(config.seed)
    img = view_template(config.view, config.size, seed=config.seed)

    if config.view is not ViewClass.RANDOM:
        sigma = config.speckle_sigma * (1.0 - config.clarity)
        if sigma > 0:
            field = 1.0 + sigma * rng.standard_normal(size=img.shape, dtype=np.float32)
            img = img * np.clip(field, 0.0, None)

        if config.gain_shift != 0.0:
            img = np.where(img > 0, img + config.gain_shift, img)

        occ = config.occlusion_fraction * (1.0 - config.completeness)
        if occ > 0:
            img = _occlude_sector(img, occ, rng)

    arr = np.clip(img, 0.0, 1.0)
    arr = (arr * 255.0 + 0.5).astype(np.uint8)
    grade = grade_of(config)
    sample_id = f"{config.view.code.lower()}-{config.seed:010d}"
    return ImageSample(id=sample_id, view=config.view, grade=grade, _image=arr)


def _occlude_sector(img: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Shadow a wedge of the scan sector covering `fraction` of its angle,
    at a random angular position."""
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    ax, ay = _APEX[0] * w, _APEX[1] * h
    ang = np.degrees(np.arctan2(xs - ax, ys - ay))
    width = fraction * 2.0 * _FAN_HALF_ANGLE_DEG
    lo = rng.uniform(-_FAN_HALF_ANGLE_DEG, _FAN_HALF_ANGLE_DEG - width)
    wedge = (ang >= lo) & (ang <= lo + width)
    out = img.copy()
    out[wedge] *= 0.08
    return out


@dataclass
class EmissionRecord:
    """Ground truth for one generated frame, kept for verification."""

    id: str
    view: ViewClass
    completeness: float
    clarity: float
    grade: float


GradeSpread = Literal["full", "high"]


@dataclass
class GeneratorConfig:
    n_per_class: int = 100
    grade_spread: GradeSpread = "full"
    seed: int = 0
    size: tuple[int, int] = (448, 448)
    views: tuple[ViewClass, ...] = tuple(ViewClass)
    speckle_sigma: float = 0.8
    occlusion_fraction: float = 0.8
    gain_jitter: float = 0.06

    def __post_init__(self):
        if self.n_per_class < 3:
            raise ValueError("n_per_class must be >= 3 so every split can be filled")


def generate_dataset(config: GeneratorConfig,
                     out_dir: "str | Path | None" = None,
                     split_seed: Optional[int] = None,
                     ) -> tuple[DatasetManifest, list[EmissionRecord]]:
    """Generate a graded dataset spanning all requested views.

    With `grade_spread="full"`, completeness and clarity are drawn from
    [0.12, 1], which covers every grade band from [1, 2) up to 10;
    `"high"` draws from [0.7, 1] for clean frames only.  Returns the
    manifest (split if `split_seed` given) and the emission log.  When
    `out_dir` is set, PNG frames, `manifest.jsonl`, and
    `emission_log.csv` are written there.
    """
    rng = np.random.default_rng(config.seed)
    lo, hi = (0.12, 1.0) if config.grade_spread == "full" else (0.7, 1.0)

    samples: list[ImageSample] = []
    emissions: list[EmissionRecord] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for view in config.views:
        for i in range(config.n_per_class):
            sample_seed = int(rng.integers(0, 2**31 - 1))
            completeness = float(rng.uniform(lo, hi))
            clarity = float(rng.uniform(lo, hi))
            gain = float(rng.uniform(-config.gain_jitter, config.gain_jitter))
            cfg = SynthConfig(
                view=view,
                completeness=completeness,
                clarity=clarity,
                speckle_sigma=config.speckle_sigma,
                gain_shift=gain,
                occlusion_fraction=config.occlusion_fraction,
                seed=sample_seed,
                size=config.size,
            )
            sample = render_view(cfg)
            sample.id = f"{view.code.lower()}-{i:05d}"
            sample.metadata = _sample_metadata(rng, gain)
            if out_path is not None:
                img_file = out_path / f"{sample.id}.png"
                Image.fromarray(sample.image).save(img_file)
                sample.source_path = str(img_file)
            samples.append(sample)
            emissions.append(EmissionRecord(
                id=sample.id, view=view,
                completeness=completeness, clarity=clarity,
                grade=sample.grade.value,
            ))

    manifest = DatasetManifest(samples=samples, seed=config.seed)
    if split_seed is not None:
        manifest = stratified_split(manifest, seed=split_seed)
    if out_path is not None:
        manifest.save_jsonl(out_path / "manifest.jsonl")
        write_emission_log(emissions, out_path / "emission_log.csv")
    return manifest, emissions


def _sample_metadata(rng: np.random.Generator, gain_shift: float) -> AcquisitionMetadata:
    return AcquisitionMetadata(
        depth_cm=float(rng.uniform(13.0, 17.0)),
        gain_db=float(np.clip(gain_shift * 250.0, -30.0, 30.0)),
        dynamic_range_db=float(rng.uniform(1.0, 10.0)),
        power_w=float(rng.uniform(2.0, 20.0)),
        probe_frequency_mhz=float(rng.uniform(1.5, 3.6)),
    )


def write_emission_log(emissions: list[EmissionRecord], path: "str | Path"):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "view", "completeness", "clarity", "grade"])
        for rec in emissions:
            writer.writerow([rec.id, rec.view.code,
                             f"{rec.completeness:.6f}", f"{rec.clarity:.6f}",
                             f"{rec.grade:.6f}"])


def read_emission_log(path: "str | Path") -> list[EmissionRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            records.append(EmissionRecord(
                id=row["id"], view=ViewClass.from_code(row["view"]),
                completeness=float(row["completeness"]),
                clarity=float(row["clarity"]),
                grade=float(row["grade"]),
            ))
    return records
