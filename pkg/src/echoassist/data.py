"""Graded cardiac ultrasound dataset model: classes, grades, manifests,
preprocessing, and deterministic stratified splitting.

A dataset is a collection of grayscale frames, each labelled with one of six
view classes and a 0-10 quality grade.  The manifest carries the samples, the
train/val/test assignment, and the normalization statistics computed from the
training split only.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import cv2
import numpy as np
from PIL import Image


class ViewClass(Enum):
    """The six view labels. Ordinal indices are fixed in this order."""

    A4C = 0      # apical four chamber
    SC = 1       # subcostal four chamber
    PL = 2       # parasternal long axis
    PSAV = 3     # parasternal short axis, aortic valve
    PSMV = 4     # parasternal short axis, mitral valve
    RANDOM = 5   # arbitrary probe position, no specific window

    @classmethod
    def from_code(cls, code: str) -> "ViewClass":
        try:
            return cls[code.upper()]
        except KeyError:
            raise ValueError(f"unknown view class {code}") from None

    @property
    def code(self) -> str:
        return self.name


#: Quality-grade bands: (low, high, description). All bands are half-open
#: [low, high) except the last, which includes its upper bound of 10.
GRADE_BANDS: tuple[tuple[float, float, str], ...] = (
    (0.0, 1.0, "The image does not capture a specific cardiac window and is not interpretable."),
    (1.0, 2.0, "Cardiac view lightly visible; structures missing or obstructed; high noise from insufficient gain/power."),
    (2.0, 3.0, "Cardiac view partially visible; some structures missing; significant obstructions."),
    (3.0, 4.0, "Partial view of the cardiac anatomy; some structures only partially discernible; fewer obstructions."),
    (4.0, 5.0, "Majority of the cardiac view visible; structures may be obstructed; satisfactory gain/power."),
    (5.0, 6.0, "Clear view and identification of cardiac structures; slight chance of minor obstructions."),
    (6.0, 7.0, "Structures visible and identifiable; minimal chance of minor obstructions."),
    (7.0, 10.0, "Cardiac view fully visible and clearly identifiable; higher grades track increasingly optimal gain/power."),
)


def grade_band(value: float) -> tuple[int, str]:
    """Return (band index, description) for a grade in [0, 10].

    Bands 0..6 are half-open [k, k+1); band 7 is the closed interval [7, 10].
    """
    if not 0.0 <= value <= 10.0:
        raise ValueError(f"grade {value} outside [0, 10]")
    for idx, (lo, hi, desc) in enumerate(GRADE_BANDS):
        if lo <= value < hi:
            return idx, desc
    # value == 10.0 falls through the half-open tests; it belongs to the last band
    return len(GRADE_BANDS) - 1, GRADE_BANDS[-1][2]


@dataclass(frozen=True)
class GradeValue:
    """A quality grade in [0, 10]. RANDOM frames carry exactly 0."""

    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 10.0:
            raise ValueError(f"grade {self.value} outside [0, 10]")

    @property
    def band(self) -> int:
        return grade_band(self.value)[0]

    @property
    def band_description(self) -> str:
        return grade_band(self.value)[1]


#: Acquisition parameter ranges considered in-spec for the scanner setup.
#: Values outside these ranges are warned about, never rejected, because
#: valid scans exist outside them (e.g. depth 19 cm).
ACQUISITION_RANGES = {
    "depth_cm": (13.0, 17.0),
    "gain_db": (-30.0, 30.0),
    "dynamic_range_db": (1.0, 10.0),
    "power_w": (2.0, 20.0),
    "probe_frequency_mhz": (1.5, 3.6),
}


@dataclass(frozen=True)
class AcquisitionMetadata:
    """Scanner settings attached to a frame. All values must be positive."""

    depth_cm: float
    gain_db: float
    dynamic_range_db: float
    power_w: float
    probe_frequency_mhz: float
    machine_frequency_hz: float = 71.5
    fps: float = 30.0

    def __post_init__(self):
        for name in ("depth_cm", "dynamic_range_db", "power_w",
                     "probe_frequency_mhz", "machine_frequency_hz", "fps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name, (lo, hi) in ACQUISITION_RANGES.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                warnings.warn(
                    f"{name}={v} outside the usual range [{lo}, {hi}]",
                    stacklevel=2,
                )

    def to_dict(self) -> dict:
        return {
            "depth_cm": self.depth_cm,
            "gain_db": self.gain_db,
            "dynamic_range_db": self.dynamic_range_db,
            "power_w": self.power_w,
            "probe_frequency_mhz": self.probe_frequency_mhz,
            "machine_frequency_hz": self.machine_frequency_hz,
            "fps": self.fps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionMetadata":
        return cls(**d)


@dataclass
class ImageSample:
    """One graded frame. The pixel grid is loaded lazily from source_path
    unless it was supplied in memory (synthetic data)."""

    id: str
    view: ViewClass
    grade: GradeValue
    source_path: str = ""
    metadata: Optional[AcquisitionMetadata] = None
    _image: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.view is ViewClass.RANDOM and self.grade.value != 0.0:
            raise ValueError(f"sample {self.id}: RANDOM frames must have grade 0, got {self.grade.value}")
        if self._image is not None:
            self._validate_image(self._image)

    @staticmethod
    def _validate_image(arr: np.ndarray):
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"image must be a nonempty 2-D grid, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            raise ValueError(f"image must be 8-bit, got {arr.dtype}")

    @property
    def image(self) -> np.ndarray:
        """2-D uint8 intensity grid; reads source_path on first access."""
        if self._image is None:
            if not self.source_path:
                raise ValueError(f"sample {self.id} has neither pixels nor a source path")
            arr = np.asarray(Image.open(self.source_path).convert("L"))
            self._validate_image(arr)
            self._image = arr
        return self._image


class Split(str, Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


@dataclass
class PreprocessSpec:
    """Deterministic frame-to-tensor pipeline parameters.

    The output is always a 3 x target x target float grid: optional crop,
    bilinear resize, intensity rescale to [0, 1], grayscale replicated to
    three channels, then per-channel (x - mean) / std.
    """

    normalization_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    normalization_std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    crop_box: Optional[tuple[int, int, int, int]] = None  # (x0, y0, x1, y1), exclusive right/bottom
    target_size: tuple[int, int] = (224, 224)

    def __post_init__(self):
        if any(s <= 0 for s in self.normalization_std):
            raise ValueError("normalization std must be positive")
        if tuple(self.target_size) != (224, 224):
            raise ValueError("target size is fixed at 224x224")

    def to_dict(self) -> dict:
        return {
            "normalization_mean": list(self.normalization_mean),
            "normalization_std": list(self.normalization_std),
            "crop_box": list(self.crop_box) if self.crop_box else None,
            "target_size": list(self.target_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessSpec":
        return cls(
            normalization_mean=tuple(d["normalization_mean"]),
            normalization_std=tuple(d["normalization_std"]),
            crop_box=tuple(d["crop_box"]) if d.get("crop_box") else None,
            target_size=tuple(d.get("target_size", (224, 224))),
        )


def preprocess(sample: "ImageSample | np.ndarray", spec: PreprocessSpec) -> np.ndarray:
    """Turn one frame into a 3x224x224 float32 grid ready for the encoder."""
    img = sample.image if isinstance(sample, ImageSample) else sample
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale grid, got shape {img.shape}")
    h, w = img.shape
    if spec.crop_box is not None:
        x0, y0, x1, y1 = spec.crop_box
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ValueError(f"crop box {spec.crop_box} outside image bounds {w}x{h}")
        img = img[y0:y1, x0:x1]
    th, tw = spec.target_size
    resized = cv2.resize(img.astype(np.float32), (tw, th), interpolation=cv2.INTER_LINEAR)
    scaled = resized / 255.0
    out = np.empty((3, th, tw), dtype=np.float32)
    for c in range(3):
        out[c] = (scaled - spec.normalization_mean[c]) / spec.normalization_std[c]
    return out


@dataclass
class DatasetManifest:
    """The dataset index: samples, split assignment, and train statistics."""

    samples: list[ImageSample]
    split_assignment: dict[str, Split] = field(default_factory=dict)
    normalization: Optional[tuple[tuple[float, float, float], tuple[float, float, float]]] = None
    seed: Optional[int] = None

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate sample ids in manifest: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def class_counts(self) -> dict[ViewClass, int]:
        counts = {v: 0 for v in ViewClass}
        for s in self.samples:
            counts[s.view] += 1
        return counts

    def by_id(self, sample_id: str) -> ImageSample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    def split_samples(self, split: Split) -> list[ImageSample]:
        return [s for s in self.samples if self.split_assignment.get(s.id) == split]

    @property
    def preprocess_spec(self) -> PreprocessSpec:
        """Preprocess parameters backed by this manifest's train statistics."""
        if self.normalization is None:
            raise ValueError("manifest has no normalization statistics; split it first")
        mean, std = self.normalization
        return PreprocessSpec(normalization_mean=mean, normalization_std=std)

    # ---- serialization: JSONL with a leading header record ----

    def save_jsonl(self, path: "str | Path"):
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            header = {"type": "header", "seed": self.seed}
            if self.normalization is not None:
                mean, std = self.normalization
                header["normalization"] = {"mean": list(mean), "std": list(std)}
            else:
                header["normalization"] = None
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for s in self.samples:
                rec = {
                    "id": s.id,
                    "path": s.source_path,
                    "view": s.view.code,
                    "grade": s.grade.value,
                    "split": self.split_assignment[s.id].value if s.id in self.split_assignment else None,
                }
                if s.metadata is not None:
                    rec["metadata"] = s.metadata.to_dict()
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path: "str | Path") -> "DatasetManifest":
        path = Path(path)
        samples: list[ImageSample] = []
        assignment: dict[str, Split] = {}
        normalization = None
        seed = None
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if rec.get("type") == "header":
                    seed = rec.get("seed")
                    norm = rec.get("normalization")
                    if norm is not None:
                        normalization = (tuple(norm["mean"]), tuple(norm["std"]))
                    continue
                meta = rec.get("metadata")
                sample = ImageSample(
                    id=rec["id"],
                    view=ViewClass.from_code(rec["view"]),
                    grade=GradeValue(float(rec["grade"])),
                    source_path=rec.get("path", ""),
                    metadata=AcquisitionMetadata.from_dict(meta) if meta else None,
                )
                samples.append(sample)
                if rec.get("split"):
                    assignment[rec["id"]] = Split(rec["split"])
        return cls(samples=samples, split_assignment=assignment,
                   normalization=normalization, seed=seed)

    def checksum(self) -> str:
        """Stable digest over ids, labels, and the split assignment."""
        h = hashlib.sha256()
        for s in sorted(self.samples, key=lambda s: s.id):
            split = self.split_assignment.get(s.id)
            h.update(f"{s.id}|{s.view.code}|{s.grade.value!r}|{split.value if split else '-'}\n".encode())
        return h.hexdigest()


def ingest_directory(root: "str | Path", layout: str = "class-folders") -> DatasetManifest:
    """Build a manifest from a dataset directory.

    ``class-folders`` layout: one subdirectory per view code, image files
    inside, and a ``grades.csv`` sidecar at the root with columns
    ``id,view,grade``.  ``manifest-file`` layout: the root contains (or is)
    a ``manifest.jsonl``.

    No split is assigned; run :func:`stratified_split` afterwards.
    """
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root {root} does not exist")

    if layout == "manifest-file":
        manifest_path = root if root.is_file() else root / "manifest.jsonl"
        return DatasetManifest.load_jsonl(manifest_path)
    if layout != "class-folders":
        raise ValueError(f"unknown layout {layout!r}")

    grades = _read_grades_sidecar(root / "grades.csv")
    samples: list[ImageSample] = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        view = ViewClass.from_code(sub.name)  # raises "unknown view class ..." for stray folders
        for img_path in sorted(sub.iterdir()):
            if img_path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            sample_id = img_path.stem
            if sample_id in grades:
                view_code, grade = grades[sample_id]
                if view_code != view.code:
                    raise ValueError(f"sample {sample_id}: folder says {view.code}, sidecar says {view_code}")
            elif view is ViewClass.RANDOM:
                grade = 0.0
            else:
                raise ValueError(f"sample {sample_id} missing from grades sidecar")
            samples.append(ImageSample(
                id=sample_id, view=view, grade=GradeValue(grade),
                source_path=str(img_path),
            ))
    return DatasetManifest(samples=samples)


def _read_grades_sidecar(path: Path) -> dict[str, tuple[str, float]]:
    grades: dict[str, tuple[str, float]] = {}
    if not path.exists():
        return grades
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = {"id", "view", "grade"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"grades sidecar missing columns: {sorted(missing)}")
        for row in reader:
            value = float(row["grade"])
            if not 0.0 <= value <= 10.0:
                raise ValueError(f"sample {row['id']}: grade {value} outside [0, 10]")
            grades[row["id"]] = (row["view"].upper(), value)
    return grades


def stratified_split(manifest: DatasetManifest, seed: int,
                     compute_normalization: bool = True) -> DatasetManifest:
    """Assign 70/10/20 train/val/test per class, deterministically.

    Within each class the shuffled samples are cut at floor(0.7 n) and
    floor(0.1 n); the remainder goes to test, so every class reaches all
    three splits and the assignment is total.  Train-split normalization
    statistics are computed unless disabled.
    """
    present = [v for v in ViewClass if manifest.class_counts[v] > 0]
    if not present:
        raise ValueError("cannot split an empty manifest")
    assignment: dict[str, Split] = {}
    rng = np.random.default_rng(seed)
    for view in present:
        ids = sorted(s.id for s in manifest.samples if s.view == view)
        n = len(ids)
        if n < 3:
            raise ValueError(f"class {view.code} has {n} samples; need at least 3 to fill every split")
        order = rng.permutation(n)
        n_train = int(np.floor(0.7 * n))
        n_val = int(np.floor(0.1 * n))
        for rank, idx in enumerate(order):
            if rank < n_train:
                assignment[ids[idx]] = Split.TRAIN
            elif rank < n_train + n_val:
                assignment[ids[idx]] = Split.VAL
            else:
                assignment[ids[idx]] = Split.TEST

    out = DatasetManifest(samples=list(manifest.samples),
                          split_assignment=assignment, seed=seed)
    if compute_normalization:
        out.normalization = compute_train_normalization(out)
    return out


def compute_train_normalization(manifest: DatasetManifest) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    """Mean/std of train-split intensities in [0, 1], replicated per channel."""
    total = 0
    acc = 0.0
    acc_sq = 0.0
    for s in manifest.split_samples(Split.TRAIN):
        x = s.image.astype(np.float64) / 255.0
        total += x.size
        acc += float(x.sum())
        acc_sq += float((x * x).sum())
    if total == 0:
        raise ValueError("no train samples to compute normalization from")
    mean = acc / total
    var = max(acc_sq / total - mean * mean, 1e-12)
    std = float(np.sqrt(var))
    return ((mean, mean, mean), (std, std, std))


@dataclass
class DatasetStatistics:
    class_counts: dict[ViewClass, int]
    grade_histograms: dict[ViewClass, list[int]]  # 8 band bins per class

    @property
    def total(self) -> int:
        return sum(self.class_counts.values())


def dataset_statistics(manifest: DatasetManifest) -> DatasetStatistics:
    """Per-class counts and per-class grade-band histograms."""
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    hist = {v: [0] * len(GRADE_BANDS) for v in ViewClass}
    for s in manifest.samples:
        hist[s.view][s.grade.band] += 1
    return DatasetStatistics(class_counts=manifest.class_counts, grade_histograms=hist)
