"""Shared residual encoder with classification and grading heads.

The encoder is an 18-layer residual network: a 7x7/stride-2 stem with
batch norm and max pooling, four stages of two basic blocks at widths
64/128/256/512, and global average pooling down to a 512-dim feature
vector.  Heads are single affine layers on the pooled features: a K-way
classifier and a scalar grader.  Exact parameter and multiply-accumulate
accounting is computed in closed form from the layer dimensions, never by
introspecting tensors, so it can cross-check the built modules.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PreprocessSpec, ViewClass

ENCODER = "encoder"
CLS_HEAD = "cls_head"
GRADE_HEAD = "grade_head"


@dataclass(frozen=True)
class EncoderSpec:
    """Residual encoder topology. Defaults give the standard 18-layer net
    (11,176,512 trainable parameters, 512-dim features, 7x7 final map for
    224x224 input). Smaller variants are used for gradient checking."""

    in_channels: int = 3
    stem_channels: int = 64
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = True
    stage_widths: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2)

    def __post_init__(self):
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ValueError("stage_widths and blocks_per_stage must align")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("each stage needs at least one block")

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "stem_channels": self.stem_channels,
            "stem_kernel": self.stem_kernel,
            "stem_stride": self.stem_stride,
            "stem_pool": self.stem_pool,
            "stage_widths": list(self.stage_widths),
            "blocks_per_stage": list(self.blocks_per_stage),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(
            in_channels=d["in_channels"],
            stem_channels=d["stem_channels"],
            stem_kernel=d["stem_kernel"],
            stem_stride=d["stem_stride"],
            stem_pool=d["stem_pool"],
            stage_widths=tuple(d["stage_widths"]),
            blocks_per_stage=tuple(d["blocks_per_stage"]),
        )


RESNET18_SPEC = EncoderSpec()

#: One-block toy encoder on tiny inputs, for finite-difference checks.
MICRO_SPEC = EncoderSpec(stem_channels=8, stem_kernel=3, stem_stride=1,
                         stem_pool=False, stage_widths=(8,), blocks_per_stage=(1,))


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with a skip connection; 1x1 projection on the
    shortcut when the shape changes."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class Encoder(nn.Module):
    """Feature extractor: stem, residual stages, global average pool."""

    def __init__(self, spec: EncoderSpec = RESNET18_SPEC):
        super().__init__()
        self.spec = spec
        pad = spec.stem_kernel // 2
        self.conv1 = nn.Conv2d(spec.in_channels, spec.stem_channels, spec.stem_kernel,
                               stride=spec.stem_stride, padding=pad, bias=False)
        self.bn1 = nn.BatchNorm2d(spec.stem_channels)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1) if spec.stem_pool else nn.Identity()
        stages = []
        in_ch = spec.stem_channels
        for i, (width, blocks) in enumerate(zip(spec.stage_widths, spec.blocks_per_stage)):
            stride = 1 if i == 0 else 2
            layers = [BasicBlock(in_ch, width, stride)]
            layers += [BasicBlock(width, width) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            in_ch = width
        self.stages = nn.Sequential(*stages)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (pooled features [B, D], final conv map [B, D, h, w])."""
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.maxpool(out)
        fmap = self.stages(out)
        return fmap.mean(dim=(2, 3)), fmap


class TwoHeadNet(nn.Module):
    """Encoder plus any subset of the two affine heads."""

    def __init__(self, spec: EncoderSpec = RESNET18_SPEC,
                 num_classes: Optional[int] = None, grading: bool = False):
        super().__init__()
        self.encoder = Encoder(spec)
        d = spec.feature_dim
        self.cls_head = nn.Linear(d, num_classes) if num_classes else None
        self.grade_head = nn.Linear(d, 1) if grading else None

    def forward(self, x):
        feats, _ = self.encoder(x)
        logits = self.cls_head(feats) if self.cls_head is not None else None
        raw = self.grade_head(feats).squeeze(-1) if self.grade_head is not None else None
        return logits, raw


@dataclass
class ModelBundle:
    """Immutable trained artifact: encoder weights, heads, class list,
    preprocessing constants, and provenance. Kept in eval mode; training
    code works on private copies."""

    net: TwoHeadNet
    classes: list[ViewClass]
    preprocess: PreprocessSpec
    encoder_spec: EncoderSpec = RESNET18_SPEC
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.net.cls_head is not None and self.net.cls_head.out_features != len(self.classes):
            raise ValueError(
                f"class list has {len(self.classes)} entries but the head emits "
                f"{self.net.cls_head.out_features} logits")
        self.net.eval()

    @property
    def has_classifier(self) -> bool:
        return self.net.cls_head is not None

    @property
    def has_grader(self) -> bool:
        return self.net.grade_head is not None

    def clone(self) -> "ModelBundle":
        return ModelBundle(net=copy.deepcopy(self.net), classes=list(self.classes),
                           preprocess=copy.deepcopy(self.preprocess),
                           encoder_spec=self.encoder_spec,
                           provenance=dict(self.provenance))

    def encoder_checksum(self) -> str:
        """Digest of the encoder weight bytes; used by freeze contracts."""
        h = hashlib.sha256()
        for name, t in sorted(self.net.encoder.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def new_bundle(classes: Sequence[ViewClass], preprocess: PreprocessSpec,
               spec: EncoderSpec = RESNET18_SPEC, grading: bool = False,
               seed: Optional[int] = None, provenance: Optional[dict] = None) -> ModelBundle:
    """Freshly initialized bundle; seeded construction is deterministic."""
    if seed is not None:
        torch.manual_seed(seed)
    net = TwoHeadNet(spec, num_classes=len(classes) or None, grading=grading)
    return ModelBundle(net=net, classes=list(classes), preprocess=preprocess,
                       encoder_spec=spec, provenance=provenance or {})


def _as_batch(x, spec: EncoderSpec) -> torch.Tensor:
    t = torch.as_tensor(np.ascontiguousarray(x)) if isinstance(x, np.ndarray) else x
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[1] != spec.in_channels:
        raise ValueError(f"expected [B, {spec.in_channels}, H, W] input, got {tuple(t.shape)}")
    return t.float()


def forward_features(bundle: ModelBundle, batch, return_map: bool = False):
    """Pooled 512-dim features for a preprocessed batch; optionally also the
    pre-pool convolutional map. Deterministic in eval mode."""
    x = _as_batch(batch, bundle.encoder_spec)
    feats, fmap = bundle.net.encoder(x)
    return (feats, fmap) if return_map else feats


def classify(bundle: ModelBundle, batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Logits and softmax probabilities; argmax indexes the class list."""
    if not bundle.has_classifier:
        raise ValueError("bundle has no classification head")
    feats = forward_features(bundle, batch)
    logits = bundle.net.cls_head(feats)
    return logits, F.softmax(logits, dim=-1)


def grade(bundle: ModelBundle, batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Raw grading output (for losses) and the [0, 10]-clamped report value."""
    if not bundle.has_grader:
        raise ValueError("bundle has no grading head")
    feats = forward_features(bundle, batch)
    raw = bundle.net.grade_head(feats).squeeze(-1)
    return raw, raw.clamp(0.0, 10.0)


# ---------------------------------------------------------------------------
# closed-form accounting
# ---------------------------------------------------------------------------

def encoder_param_count(spec: EncoderSpec = RESNET18_SPEC) -> int:
    """Trainable parameter count from the layer dimensions alone."""

    def conv(cin, cout, k):
        return cout * cin * k * k

    def bn(ch):
        return 2 * ch

    total = conv(spec.in_channels, spec.stem_channels, spec.stem_kernel) + bn(spec.stem_channels)
    in_ch = spec.stem_channels
    for i, (width, blocks) in enumerate(zip(spec.stage_widths, spec.blocks_per_stage)):
        for b in range(blocks):
            stride = 2 if (i > 0 and b == 0) else 1
            cin = in_ch if b == 0 else width
            total += conv(cin, width, 3) + bn(width)
            total += conv(width, width, 3) + bn(width)
            if stride != 1 or cin != width:
                total += conv(cin, width, 1) + bn(width)
        in_ch = width
    return total


def head_param_count(feature_dim: int, out_dim: int) -> int:
    return feature_dim * out_dim + out_dim


def count_trainable_params(model: "ModelBundle | EncoderSpec",
                           include: Iterable[str] = (ENCODER, CLS_HEAD, GRADE_HEAD),
                           frozen: Iterable[str] = (),
                           num_classes: Optional[int] = None) -> int:
    """Exact trainable parameter count for any component combination.

    `include` selects components; anything also named in `frozen`
    contributes zero.  Pass an EncoderSpec plus `num_classes` to count a
    hypothetical model, or a bundle to count what it actually carries.
    """
    if isinstance(model, ModelBundle):
        spec = model.encoder_spec
        k = len(model.classes) if model.has_classifier else None
    else:
        spec = model
        k = num_classes
    include = set(include)
    frozen = set(frozen)
    total = 0
    if ENCODER in include and ENCODER not in frozen:
        total += encoder_param_count(spec)
    if CLS_HEAD in include and CLS_HEAD not in frozen:
        if k is None:
            raise ValueError("classification head requested but class count unknown")
        total += head_param_count(spec.feature_dim, k)
    if GRADE_HEAD in include and GRADE_HEAD not in frozen:
        total += head_param_count(spec.feature_dim, 1)
    return total


@dataclass
class LayerCost:
    name: str
    kind: str          # conv | linear | bn | act | pool
    macs: int          # multiply-accumulates (conv/linear only)
    elementwise: int   # per-element ops for bn/act/pool
    out_shape: tuple[int, ...]


@dataclass
class FlopReport:
    """Analytic compute cost. The headline count is multiply-accumulates
    over convolutions and affine heads; normalization, activations, and
    pooling are tallied separately as elementwise operations."""

    layers: list[LayerCost]
    input_shape: tuple[int, int, int]

    @property
    def conv_linear_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def bn_elementwise(self) -> int:
        return sum(l.elementwise for l in self.layers if l.kind == "bn")

    @property
    def activation_elementwise(self) -> int:
        return sum(l.elementwise for l in self.layers if l.kind == "act")

    @property
    def pool_elementwise(self) -> int:
        return sum(l.elementwise for l in self.layers if l.kind == "pool")

    def total(self, mac_convention: int = 1) -> int:
        """MACs expressed under the chosen convention (1 FLOP or 2 FLOPs
        per multiply-accumulate)."""
        if mac_convention not in (1, 2):
            raise ValueError("mac_convention must be 1 or 2")
        return self.conv_linear_macs * mac_convention


def _conv_out(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def estimate_flops(spec: EncoderSpec = RESNET18_SPEC,
                   input_hw: tuple[int, int] = (224, 224),
                   num_classes: Optional[int] = None,
                   grading: bool = False) -> FlopReport:
    """Per-layer analytic cost of one forward pass at the given input size."""
    h, w = input_hw
    layers: list[LayerCost] = []

    def add_conv(name, cin, cout, k, stride, pad, hin, win):
        hout, wout = _conv_out(hin, k, stride, pad), _conv_out(win, k, stride, pad)
        macs = cout * cin * k * k * hout * wout
        layers.append(LayerCost(name, "conv", macs, 0, (cout, hout, wout)))
        return hout, wout

    def add_bn(name, ch, hh, ww):
        layers.append(LayerCost(name, "bn", 0, 2 * ch * hh * ww, (ch, hh, ww)))

    def add_act(name, ch, hh, ww):
        layers.append(LayerCost(name, "act", 0, ch * hh * ww, (ch, hh, ww)))

    pad = spec.stem_kernel // 2
    hh, ww = add_conv("stem.conv", spec.in_channels, spec.stem_channels,
                      spec.stem_kernel, spec.stem_stride, pad, h, w)
    add_bn("stem.bn", spec.stem_channels, hh, ww)
    add_act("stem.relu", spec.stem_channels, hh, ww)
    if spec.stem_pool:
        ph, pw = _conv_out(hh, 3, 2, 1), _conv_out(ww, 3, 2, 1)
        layers.append(LayerCost("stem.maxpool", "pool", 0,
                                9 * spec.stem_channels * ph * pw, (spec.stem_channels, ph, pw)))
        hh, ww = ph, pw

    in_ch = spec.stem_channels
    for i, (width, blocks) in enumerate(zip(spec.stage_widths, spec.blocks_per_stage)):
        for b in range(blocks):
            stride = 2 if (i > 0 and b == 0) else 1
            cin = in_ch if b == 0 else width
            tag = f"stage{i + 1}.block{b + 1}"
            h2, w2 = add_conv(f"{tag}.conv1", cin, width, 3, stride, 1, hh, ww)
            add_bn(f"{tag}.bn1", width, h2, w2)
            add_act(f"{tag}.relu1", width, h2, w2)
            add_conv(f"{tag}.conv2", width, width, 3, 1, 1, h2, w2)
            add_bn(f"{tag}.bn2", width, h2, w2)
            if stride != 1 or cin != width:
                add_conv(f"{tag}.downsample", cin, width, 1, stride, 0, hh, ww)
                add_bn(f"{tag}.downsample_bn", width, h2, w2)
            add_act(f"{tag}.relu2", width, h2, w2)
            hh, ww = h2, w2
        in_ch = width

    layers.append(LayerCost("gap", "pool", 0, spec.feature_dim * hh * ww, (spec.feature_dim,)))
    if num_classes:
        layers.append(LayerCost("cls_head", "linear",
                                spec.feature_dim * num_classes, 0, (num_classes,)))
    if grading:
        layers.append(LayerCost("grade_head", "linear", spec.feature_dim, 0, (1,)))
    return FlopReport(layers=layers, input_shape=(spec.in_channels, h, w))


# ---------------------------------------------------------------------------
# head expansion
# ---------------------------------------------------------------------------

def expand_classification_head(bundle: ModelBundle, new_class: ViewClass,
                               init: str = "zeros", init_scale: float = 0.01,
                               seed: Optional[int] = None) -> ModelBundle:
    """Grow the classifier by one class, copying the old rows verbatim.

    The new row is zero by default, so every old-class logit is bitwise
    unchanged and the new class starts with logit 0 on any input.
    """
    if not bundle.has_classifier:
        raise ValueError("bundle has no classification head to expand")
    if new_class in bundle.classes:
        raise ValueError(f"class {new_class.code} already present")
    out = bundle.clone()
    old = out.net.cls_head
    k, d = old.out_features, old.in_features
    head = nn.Linear(d, k + 1)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
        head.weight[:k] = old.weight
        head.bias[:k] = old.bias
        if init == "random":
            gen = torch.Generator().manual_seed(seed if seed is not None else 0)
            head.weight[k] = torch.randn(d, generator=gen) * init_scale
        elif init != "zeros":
            raise ValueError(f"unknown init {init!r}")
    out.net.cls_head = head
    out.classes = list(bundle.classes) + [new_class]
    out.provenance = dict(bundle.provenance, expanded_with=new_class.code)
    return ModelBundle(net=out.net, classes=out.classes, preprocess=out.preprocess,
                       encoder_spec=out.encoder_spec, provenance=out.provenance)


# ---------------------------------------------------------------------------
# persistence: single archive with a JSON header, raw arrays, checksum
# ---------------------------------------------------------------------------

BUNDLE_MAGIC = b"ECHOBNDL"
BUNDLE_VERSION = 1


class BundleFormatError(ValueError):
    pass


class BundleChecksumError(ValueError):
    pass


_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


def save_bundle(bundle: ModelBundle, path: "str | Path") -> str:
    """Write the bundle archive; returns its checksum (also stored in the
    trailer). Weights are raw little-endian arrays indexed by name."""
    arrays = []
    payload = io.BytesIO()
    offset = 0
    for name, tensor in bundle.net.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype == np.float32:
            dtype = "<f4"
        elif arr.dtype == np.int64:
            dtype = "<i8"
        else:
            raise BundleFormatError(f"unsupported array dtype {arr.dtype} for {name}")
        raw = arr.astype(_DTYPES[dtype], copy=False).tobytes()
        arrays.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(raw)})
        payload.write(raw)
        offset += len(raw)

    header = {
        "format_version": BUNDLE_VERSION,
        "classes": [v.code for v in bundle.classes],
        "has_classifier": bundle.has_classifier,
        "has_grader": bundle.has_grader,
        "preprocess": bundle.preprocess.to_dict(),
        "encoder_spec": bundle.encoder_spec.to_dict(),
        "provenance": bundle.provenance,
        "arrays": arrays,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC)
    buf.write(struct.pack("<I", BUNDLE_VERSION))
    buf.write(struct.pack("<Q", len(header_bytes)))
    buf.write(header_bytes)
    buf.write(payload.getvalue())
    digest = hashlib.sha256(buf.getvalue()).digest()
    buf.write(digest)

    Path(path).write_bytes(buf.getvalue())
    return digest.hex()


def load_bundle(path: "str | Path") -> ModelBundle:
    data = Path(path).read_bytes()
    if len(data) < len(BUNDLE_MAGIC) + 12 + 32 or data[:len(BUNDLE_MAGIC)] != BUNDLE_MAGIC:
        raise BundleFormatError(f"{path} is not a bundle archive")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise BundleChecksumError(f"{path}: checksum mismatch (truncated or corrupt)")

    pos = len(BUNDLE_MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != BUNDLE_VERSION:
        raise BundleFormatError(f"unsupported bundle version {version}")
    (header_len,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    header = json.loads(body[pos:pos + header_len].decode("utf-8"))
    payload = body[pos + header_len:]

    spec = EncoderSpec.from_dict(header["encoder_spec"])
    classes = [ViewClass.from_code(c) for c in header["classes"]]
    net = TwoHeadNet(spec,
                     num_classes=len(classes) if header["has_classifier"] else None,
                     grading=header["has_grader"])
    state = {}
    for meta in header["arrays"]:
        dtype = _DTYPES[meta["dtype"]]
        raw = payload[meta["offset"]:meta["offset"] + meta["nbytes"]]
        arr = np.frombuffer(raw, dtype=dtype).reshape(meta["shape"]).copy()
        state[meta["name"]] = torch.from_numpy(arr)
    net.load_state_dict(state)

    return ModelBundle(net=net, classes=classes,
                       preprocess=PreprocessSpec.from_dict(header["preprocess"]),
                       encoder_spec=spec, provenance=header.get("provenance", {}))


class FastPredictor:
    """Low-latency inference wrapper: a bf16 channels-last copy of the
    two-head net for single-frame prediction on CPU. Falls back to fp32
    when reduced precision is unavailable."""

    def __init__(self, bundle: ModelBundle, dtype: Optional[torch.dtype] = torch.bfloat16):
        self.bundle = bundle
        self.dtype = dtype or torch.float32
        net = copy.deepcopy(bundle.net).eval()
        if self.dtype != torch.float32:
            net = net.to(self.dtype)
        self.net = net.to(memory_format=torch.channels_last)

    @torch.no_grad()
    def predict(self, frame: np.ndarray) -> tuple[np.ndarray, float]:
        """Preprocessed 3x224x224 frame -> (probabilities float32[K],
        clamped grade)."""
        x = torch.as_tensor(frame).unsqueeze(0).to(self.dtype)
        x = x.to(memory_format=torch.channels_last)
        logits, raw = self.net(x)
        probs = F.softmax(logits.float(), dim=-1)[0].numpy() if logits is not None else None
        value = float(raw.float().clamp(0.0, 10.0)[0]) if raw is not None else None
        return probs, value
