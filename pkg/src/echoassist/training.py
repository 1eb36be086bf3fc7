"""Training regimes for the two-head model.

Four entry points mirror the workflow: classification from scratch,
transfer-learned grading on a frozen encoder, joint multi-task training as
the baseline, and fine-tuning after a new view class arrives.  All regimes
share plain SGD, categorical cross-entropy for views, and mean squared
error on the raw grading output, with a fixed epoch budget and seeded,
reproducible runs.

On CPU the loops default to bf16 autocast with channels-last layout and a
compiled forward, which is several times faster than eager fp32; set
``precision="fp32"`` and ``compile=False`` for bitwise-reproducible
reference runs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, PreprocessSpec, Split, ViewClass, preprocess
from .model import (
    EncoderSpec,
    ModelBundle,
    RESNET18_SPEC,
    TwoHeadNet,
    expand_classification_head,
    new_bundle,
)
from .runtime import bf16_supported, configure_cpu

log = logging.getLogger(__name__)

#: Initial five-class task; the mitral-valve short axis arrives later via
#: fine-tuning.
DEFAULT_CLASSES: tuple[ViewClass, ...] = (
    ViewClass.A4C, ViewClass.SC, ViewClass.PL, ViewClass.PSAV, ViewClass.RANDOM,
)


@dataclass
class TrainConfig:
    """Hyperparameters shared by every regime."""

    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.001
    momentum: float = 0.0
    weight_decay: float = 0.0
    mtl_lambda: float = 1.0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    num_runs: int = 5
    encoder_frozen: bool = False
    encoder_spec: EncoderSpec = RESNET18_SPEC
    precision: str = "auto"       # auto | bf16 | fp32
    compile: bool = True
    new_class_init: str = "zeros"
    num_threads: Optional[int] = None

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.mtl_lambda < 0:
            raise ValueError("momentum, weight_decay, mtl_lambda must be >= 0")
        if self.num_runs != len(self.seeds):
            raise ValueError(f"num_runs={self.num_runs} but {len(self.seeds)} seeds given")
        if self.precision not in ("auto", "bf16", "fp32"):
            raise ValueError(f"unknown precision {self.precision!r}")

    def resolved_precision(self) -> str:
        if self.precision != "auto":
            return self.precision
        return "bf16" if bf16_supported() else "fp32"

    def config_hash(self) -> str:
        payload = asdict(self)
        payload["encoder_spec"] = self.encoder_spec.to_dict()
        blob = json.dumps(payload, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class RunHistory:
    """Per-epoch curves of one seeded run."""

    seed: int
    epochs: int
    series: dict[str, list[float]] = field(default_factory=dict)
    wall_clock: list[float] = field(default_factory=list)

    def __post_init__(self):
        for key, values in self.series.items():
            if len(values) != self.epochs:
                raise ValueError(f"curve {key} has {len(values)} points, expected {self.epochs}")

    def final(self, key: str) -> float:
        return self.series[key][-1]


@dataclass
class AveragedHistory:
    """Per-run curves plus their arithmetic mean across seeds."""

    runs: list[RunHistory]

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.runs]

    @property
    def epochs(self) -> int:
        return self.runs[0].epochs

    def averaged(self) -> dict[str, list[float]]:
        keys = self.runs[0].series.keys()
        out = {}
        for key in keys:
            stacked = np.array([r.series[key] for r in self.runs], dtype=np.float64)
            out[key] = stacked.mean(axis=0).tolist()
        return out

    def to_csv(self, path: "str | Path"):
        write_history_csv(self.runs, path, averaged=self.averaged())


def write_history_csv(runs: Sequence[RunHistory], path: "str | Path",
                      averaged: Optional[dict[str, list[float]]] = None):
    """History CSV with columns epoch, split, metric, value, run_seed.
    Series keys are '<split>_<metric>'; averaged curves use run_seed=mean."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "split", "metric", "value", "run_seed"])
        for run in runs:
            for key, values in run.series.items():
                split, metric = key.split("_", 1)
                for epoch, value in enumerate(values, 1):
                    writer.writerow([epoch, split, metric, f"{value:.8g}", run.seed])
            for epoch, secs in enumerate(run.wall_clock, 1):
                writer.writerow([epoch, "-", "epoch_seconds", f"{secs:.4f}", run.seed])
        if averaged:
            for key, values in averaged.items():
                split, metric = key.split("_", 1)
                for epoch, value in enumerate(values, 1):
                    writer.writerow([epoch, split, metric, f"{value:.8g}", "mean"])


def save_run_summary(path: "str | Path", config: TrainConfig, final_metrics: dict):
    summary = {"config_hash": config.config_hash(),
               "config": {**asdict(config), "encoder_spec": config.encoder_spec.to_dict()},
               "final": final_metrics}
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

@dataclass
class SplitTensors:
    x: torch.Tensor          # [N, 3, H, W]
    y_view: torch.Tensor     # [N] long, indices into the class list
    y_grade: torch.Tensor    # [N] float32
    ids: list[str]

    def __len__(self):
        return self.x.shape[0]


def _split_tensors(manifest: DatasetManifest, classes: Sequence[ViewClass],
                   split: Split, spec: PreprocessSpec, dtype: torch.dtype) -> SplitTensors:
    class_index = {v: i for i, v in enumerate(classes)}
    samples = [s for s in manifest.split_samples(split) if s.view in class_index]
    if not samples:
        raise ValueError(f"no {split.value} samples for classes "
                         f"{[c.code for c in classes]}; is the manifest split?")
    xs = np.stack([preprocess(s, spec) for s in samples])
    return SplitTensors(
        x=torch.from_numpy(xs).to(dtype),
        y_view=torch.tensor([class_index[s.view] for s in samples], dtype=torch.long),
        y_grade=torch.tensor([s.grade.value for s in samples], dtype=torch.float32),
        ids=[s.id for s in samples],
    )


class _Forward:
    """Compiled forward with a one-shot fallback to eager execution."""

    def __init__(self, net: TwoHeadNet, use_compile: bool):
        self.net = net
        self.fn = torch.compile(net) if use_compile else net
        self.tried = not use_compile

    def __call__(self, x):
        if not self.tried:
            self.tried = True
            try:
                return self.fn(x)
            except Exception as exc:  # inductor backend unavailable, etc.
                log.warning("compiled forward failed (%s); falling back to eager", exc)
                self.fn = self.net
        return self.fn(x)


def _autocast(precision: str):
    if precision == "bf16":
        return torch.autocast("cpu", dtype=torch.bfloat16)
    return torch.autocast("cpu", enabled=False)


# ---------------------------------------------------------------------------
# the shared epoch loop
# ---------------------------------------------------------------------------

def _train_epochs(net: TwoHeadNet, train: SplitTensors, val: SplitTensors,
                  config: TrainConfig, seed: int, task: str) -> RunHistory:
    """Run the SGD loop for `task` in {cls, grade, mtl}, recording per-epoch
    train/val curves. Data order is a pure function of the seed."""
    precision = config.resolved_precision()
    configure_cpu(config.num_threads)
    net = net.to(memory_format=torch.channels_last)
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=config.learning_rate,
                          momentum=config.momentum, weight_decay=config.weight_decay)
    fwd = _Forward(net, config.compile)
    order_gen = torch.Generator().manual_seed(seed)

    n = len(train)
    series: dict[str, list[float]] = {}
    wall: list[float] = []

    def record(key: str, value: float):
        series.setdefault(key, []).append(value)

    for _epoch in range(config.epochs):
        t0 = time.perf_counter()
        net.train()
        perm = torch.randperm(n, generator=order_gen)
        seen = correct = 0
        loss_cls_sum = loss_mse_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb = train.x[idx].to(memory_format=torch.channels_last)
            with _autocast(precision):
                logits, raw = fwd(xb)
            loss = xb.new_zeros((), dtype=torch.float32)
            if task in ("cls", "mtl"):
                yb = train.y_view[idx]
                cls_loss = F.cross_entropy(logits.float(), yb)
                loss = loss + cls_loss
                loss_cls_sum += float(cls_loss) * len(idx)
                correct += int((logits.argmax(dim=-1) == yb).sum())
            if task in ("grade", "mtl"):
                gb = train.y_grade[idx]
                mse = F.mse_loss(raw.float(), gb)
                weight = config.mtl_lambda if task == "mtl" else 1.0
                loss = loss + weight * mse
                loss_mse_sum += float(mse) * len(idx)
            seen += len(idx)
            opt.zero_grad()
            loss.backward()
            opt.step()

        if task in ("cls", "mtl"):
            record("train_accuracy", correct / seen)
            record("train_cce", loss_cls_sum / seen)
        if task in ("grade", "mtl"):
            record("train_mse", loss_mse_sum / seen)

        val_metrics = _evaluate(net, val, config, task)
        for key, value in val_metrics.items():
            record(f"val_{key}", value)
        wall.append(time.perf_counter() - t0)

    net.eval()
    return RunHistory(seed=seed, epochs=config.epochs, series=series, wall_clock=wall)


@torch.no_grad()
def _evaluate(net: TwoHeadNet, data: SplitTensors, config: TrainConfig, task: str,
              batch_size: int = 128) -> dict[str, float]:
    precision = config.resolved_precision()
    net.eval()
    n = len(data)
    correct = 0
    se_sum = 0.0
    for start in range(0, n, batch_size):
        xb = data.x[start:start + batch_size].to(memory_format=torch.channels_last)
        with _autocast(precision):
            logits, raw = net(xb)
        if task in ("cls", "mtl"):
            correct += int((logits.float().argmax(dim=-1) == data.y_view[start:start + batch_size]).sum())
        if task in ("grade", "mtl"):
            diff = raw.float() - data.y_grade[start:start + batch_size]
            se_sum += float((diff * diff).sum())
    out: dict[str, float] = {}
    if task in ("cls", "mtl"):
        out["accuracy"] = correct / n
    if task in ("grade", "mtl"):
        out["mse"] = se_sum / n
    return out


def _storage_dtype(config: TrainConfig) -> torch.dtype:
    return torch.bfloat16 if config.resolved_precision() == "bf16" else torch.float32


def _require_split(manifest: DatasetManifest):
    if not manifest.split_assignment:
        raise ValueError("manifest has no split assignment; run stratified_split first")


# ---------------------------------------------------------------------------
# regimes
# ---------------------------------------------------------------------------

def train_classification(manifest: DatasetManifest, config: TrainConfig,
                         classes: Sequence[ViewClass] = DEFAULT_CLASSES,
                         seed: Optional[int] = None) -> tuple[ModelBundle, RunHistory]:
    """Train the encoder and a K-way head from scratch with cross-entropy.

    Samples outside `classes` are ignored; every requested class must be
    present in both train and val splits.  The final-epoch weights are
    returned (fixed epoch budget, no early stopping).
    """
    _require_split(manifest)
    seed = config.seeds[0] if seed is None else seed
    for cls in classes:
        if manifest.class_counts[cls] == 0:
            raise ValueError(f"manifest has no samples for requested class {cls.code}")
    spec = manifest.preprocess_spec
    dtype = _storage_dtype(config)
    train = _split_tensors(manifest, classes, Split.TRAIN, spec, dtype)
    val = _split_tensors(manifest, classes, Split.VAL, spec, dtype)

    torch.manual_seed(seed)
    net = TwoHeadNet(config.encoder_spec, num_classes=len(classes), grading=False)
    history = _train_epochs(net, train, val, config, seed, task="cls")

    bundle = ModelBundle(net=net, classes=list(classes), preprocess=spec,
                         encoder_spec=config.encoder_spec,
                         provenance={"task": "classification", "seed": seed,
                                     "epochs": config.epochs,
                                     "config_hash": config.config_hash()})
    return bundle, history


def encoder_features(bundle: ModelBundle, data_x: torch.Tensor, config: TrainConfig,
                     batch_size: int = 128) -> torch.Tensor:
    """Eval-mode pooled features for a tensor of preprocessed frames."""
    precision = config.resolved_precision()
    enc = bundle.net.encoder.eval()
    feats = []
    with torch.no_grad():
        for start in range(0, data_x.shape[0], batch_size):
            xb = data_x[start:start + batch_size].to(memory_format=torch.channels_last)
            with _autocast(precision):
                f, _ = enc(xb)
            feats.append(f.float())
    return torch.cat(feats)


def transfer_grading(bundle: ModelBundle, manifest: DatasetManifest, config: TrainConfig,
                     seed: Optional[int] = None) -> tuple[ModelBundle, RunHistory]:
    """Train a grading head on top of the frozen, classification-pretrained
    encoder.

    Only the 513 head parameters receive updates; encoder weights (and its
    batch-norm running statistics) are untouched, which the caller can
    verify via `ModelBundle.encoder_checksum`.  Because the encoder is
    frozen and in eval mode, its features are precomputed once and the
    epochs run over the cached feature table.
    """
    if bundle.net.encoder is None:  # pragma: no cover - encoder always exists
        raise ValueError("bundle has no encoder")
    seed = config.seeds[0] if seed is None else seed
    _require_split(manifest)
    spec = bundle.preprocess
    dtype = _storage_dtype(config)
    classes = bundle.classes if bundle.has_classifier else list(ViewClass)
    train = _split_tensors(manifest, classes, Split.TRAIN, spec, dtype)
    val = _split_tensors(manifest, classes, Split.VAL, spec, dtype)

    feats_train = encoder_features(bundle, train.x, config)
    feats_val = encoder_features(bundle, val.x, config)

    torch.manual_seed(seed)
    head = torch.nn.Linear(bundle.encoder_spec.feature_dim, 1)
    opt = torch.optim.SGD(head.parameters(), lr=config.learning_rate,
                          momentum=config.momentum, weight_decay=config.weight_decay)
    order_gen = torch.Generator().manual_seed(seed)

    n = feats_train.shape[0]
    series: dict[str, list[float]] = {"train_mse": [], "val_mse": []}
    wall: list[float] = []
    for _epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = torch.randperm(n, generator=order_gen)
        mse_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            raw = head(feats_train[idx]).squeeze(-1)
            loss = F.mse_loss(raw, train.y_grade[idx])
            mse_sum += float(loss) * len(idx)
            opt.zero_grad()
            loss.backward()
            opt.step()
        series["train_mse"].append(mse_sum / n)
        with torch.no_grad():
            val_raw = head(feats_val).squeeze(-1)
            series["val_mse"].append(float(F.mse_loss(val_raw, val.y_grade)))
        wall.append(time.perf_counter() - t0)

    out = bundle.clone()
    out.net.grade_head = head
    out.provenance = dict(bundle.provenance, grading="transfer", grading_seed=seed)
    out = ModelBundle(net=out.net, classes=out.classes, preprocess=out.preprocess,
                      encoder_spec=out.encoder_spec, provenance=out.provenance)
    history = RunHistory(seed=seed, epochs=config.epochs, series=series, wall_clock=wall)
    return out, history


def train_mtl(manifest: DatasetManifest, config: TrainConfig,
              classes: Sequence[ViewClass] = DEFAULT_CLASSES,
              seed: Optional[int] = None) -> tuple[ModelBundle, RunHistory]:
    """Joint baseline: encoder and both heads trained from scratch with the
    combined loss CCE + lambda * MSE."""
    _require_split(manifest)
    seed = config.seeds[0] if seed is None else seed
    spec = manifest.preprocess_spec
    dtype = _storage_dtype(config)
    train = _split_tensors(manifest, classes, Split.TRAIN, spec, dtype)
    val = _split_tensors(manifest, classes, Split.VAL, spec, dtype)

    torch.manual_seed(seed)
    net = TwoHeadNet(config.encoder_spec, num_classes=len(classes), grading=True)
    history = _train_epochs(net, train, val, config, seed, task="mtl")

    bundle = ModelBundle(net=net, classes=list(classes), preprocess=spec,
                         encoder_spec=config.encoder_spec,
                         provenance={"task": "mtl", "seed": seed,
                                     "mtl_lambda": config.mtl_lambda,
                                     "config_hash": config.config_hash()})
    return bundle, history


@dataclass
class FineTuneHistory:
    classification: RunHistory
    grading: RunHistory


def fine_tune_new_view(bundle: ModelBundle, manifest: DatasetManifest, config: TrainConfig,
                       new_class: ViewClass = ViewClass.PSMV,
                       seed: Optional[int] = None) -> tuple[ModelBundle, FineTuneHistory]:
    """Adapt a trained bundle to one more view class.

    The classifier grows by a zero row (old logits bitwise preserved), the
    whole classification path is fine-tuned on the extended data (encoder
    unfrozen unless `config.encoder_frozen`), and grading is then re-learned
    on the updated frozen encoder.
    """
    _require_split(manifest)
    seed = config.seeds[0] if seed is None else seed
    if manifest.class_counts[new_class] == 0:
        raise ValueError(f"manifest has no samples for new class {new_class.code}")

    expanded = expand_classification_head(bundle, new_class,
                                          init=config.new_class_init, seed=seed)
    classes = expanded.classes
    spec = expanded.preprocess
    dtype = _storage_dtype(config)
    train = _split_tensors(manifest, classes, Split.TRAIN, spec, dtype)
    val = _split_tensors(manifest, classes, Split.VAL, spec, dtype)

    net = expanded.net
    if config.encoder_frozen:
        for p in net.encoder.parameters():
            p.requires_grad_(False)
    torch.manual_seed(seed)  # data order seeding lives in _train_epochs
    cls_history = _train_epochs(net, train, val, config, seed, task="cls")
    for p in net.encoder.parameters():
        p.requires_grad_(True)

    tuned = ModelBundle(net=net, classes=classes, preprocess=spec,
                        encoder_spec=expanded.encoder_spec,
                        provenance=dict(bundle.provenance, fine_tuned_with=new_class.code,
                                        fine_tune_seed=seed))
    final, grade_history = transfer_grading(tuned, manifest, config, seed=seed)
    return final, FineTuneHistory(classification=cls_history, grading=grade_history)


def multi_run_average(op: Callable[[int], "RunHistory | tuple"],
                      seeds: Sequence[int]) -> tuple[list, AveragedHistory]:
    """Run `op(seed)` per seed and average the resulting curves.

    `op` may return a RunHistory or a (result, RunHistory) pair; the
    results are collected in order.
    """
    if not seeds:
        raise ValueError("at least one seed required")
    results = []
    histories = []
    for seed in seeds:
        out = op(seed)
        if isinstance(out, RunHistory):
            results.append(None)
            histories.append(out)
        else:
            result, history = out
            results.append(result)
            histories.append(history)
    return results, AveragedHistory(runs=histories)
