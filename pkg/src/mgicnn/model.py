"""Multi-scale 3D CNNs: the two-stream gradual-integration network and its ablations.

Variants
--------
``MGI``  zoom-in and zoom-out gradual streams fused before a shared head.
``ZI``   single zoom-in stream, scales fed S1 -> S2 -> S3.
``ZO``   single zoom-out stream, scales fed S3 -> S2 -> S1.
``RI``   the three scales stacked as channels at the input.
``LR``   one first conv block per scale, summed, then a shared trunk.

Every trunk ends with a conv and a 2x2x2 max-pool, giving ``(C, 3, 10, 10)``
maps.  The head runs ``head_channels`` convs, pools to ``(C, 2, 5, 5)`` and
finishes with fully-connected layers plus a 2-way softmax.

Tensors use the torch layout ``(N, C, z, y, x)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .initialization import init_module
from .patching import PATCH_SHAPE, PatchTriple

VARIANTS = ("MGI", "RI", "LR", "ZI", "ZO")
FUSIONS = ("concat", "sum", "conv1x1")
STAGE_NAMES = ("F1", "F12", "F123")

CHECKPOINT_MAGIC = b"MGICKPT\n"
CHECKPOINT_VERSION = 1

_MEMORY_FORMAT = torch.channels_last_3d


class ShapeError(ValueError):
    """A tensor reached a layer with an incompatible shape."""


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "MGI"
    fusion: str = "sum"
    stage_channels: tuple[int, ...] = (32, 48, 64)
    head_channels: tuple[int, ...] = (64,)
    fc_widths: tuple[int, ...] = (1024, 1024)
    dropout_rate: float = 0.5
    num_classes: int = 2
    # MGI only; defaults to stage_channels.  Lets the zoom-out stream differ.
    zoom_out_channels: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        for name in ("stage_channels", "head_channels", "fc_widths"):
            object.__setattr__(self, name, tuple(int(c) for c in getattr(self, name)))
        if self.zoom_out_channels is not None:
            object.__setattr__(self, "zoom_out_channels", tuple(int(c) for c in self.zoom_out_channels))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        for widths in (self.stage_channels, self.zoom_out_channels or self.stage_channels):
            if len(widths) != 3:
                raise ValueError(f"need exactly three stage widths, got {widths}")
            if any(c < 1 for c in widths):
                raise ValueError(f"stage widths must be positive, got {widths}")
            if any(b < a for a, b in zip(widths, widths[1:])):
                raise ValueError(f"stage widths must be non-decreasing, got {widths}")
        if not self.head_channels or any(c < 1 for c in self.head_channels):
            raise ValueError("head_channels must be a non-empty list of positive widths")
        if any(c < 1 for c in self.fc_widths):
            raise ValueError("fc widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.num_classes != 2:
            raise ValueError("only two-class output is supported")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# Default widths per variant.  Per-layer widths are not published; the
# first hidden FC width is chosen per variant so the parameter counts sit
# next to the reported totals (~9.46M-9.47M).
_DEFAULT_FC1 = {"MGI": 2007, "RI": 2109, "LR": 2097, "ZI": 2109, "ZO": 2109}


def default_config(variant: str = "MGI", fusion: str = "sum", **overrides) -> ModelConfig:
    base = ModelConfig(variant=variant, fusion=fusion, fc_widths=(_DEFAULT_FC1[variant], 1024))
    return replace(base, **overrides) if overrides else base


def desk_config(variant: str = "MGI", fusion: str = "sum", **overrides) -> ModelConfig:
    """A narrow configuration that trains on one CPU core in minutes."""
    base = ModelConfig(
        variant=variant,
        fusion=fusion,
        stage_channels=(4, 4, 8),
        head_channels=(8,),
        fc_widths=(32,),
    )
    return replace(base, **overrides) if overrides else base


# --------------------------------------------------------------------------
# building blocks


def conv3(cin: int, cout: int) -> nn.Conv3d:
    return nn.Conv3d(cin, cout, kernel_size=3, stride=1, padding=1)


def pool() -> nn.MaxPool3d:
    return nn.MaxPool3d(kernel_size=2, stride=2, ceil_mode=True)


class ConvBlock(nn.Sequential):
    """Two same-padded 3x3x3 convolutions, each followed by ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__(conv3(cin, cout), nn.ReLU(), conv3(cout, cout), nn.ReLU())
        self.out_channels = cout


class Reduce(nn.Sequential):
    """Conv + ReLU + max-pool closing every trunk."""

    def __init__(self, channels: int):
        super().__init__(conv3(channels, channels), nn.ReLU(), pool())


def _run(name: str, module: nn.Module, *args):
    try:
        return module(*args)
    except RuntimeError as exc:
        shapes = ", ".join(str(tuple(a.shape)) for a in args)
        raise ShapeError(f"layer {name!r} rejected input of shape {shapes}: {exc}") from None


class GradualStream(nn.Module):
    """Gradual feature extraction over the scales in ``order``.

    Stage k convolves the previous feature maps concatenated with the next
    raw patch, so the scale order fixes the flow (zoom-in = (0, 1, 2)).
    """

    def __init__(self, widths: Sequence[int], order: Sequence[int], tag: str):
        super().__init__()
        self.order = tuple(order)
        self.tag = tag
        w1, w2, w3 = widths
        self.stage1 = ConvBlock(1, w1)
        self.stage2 = ConvBlock(w1 + 1, w2)
        self.stage3 = ConvBlock(w2 + 1, w3)
        self.reduce = Reduce(w3)
        self.out_channels = w3

    def forward(self, x, taps: Optional[dict] = None):
        s = [x[:, i : i + 1] for i in self.order]
        f = _run(f"{self.tag}.stage1", self.stage1, s[0])
        _tap(taps, f"{self.tag}.F1", f)
        f = _run(f"{self.tag}.stage2", self.stage2, torch.cat([f, s[1]], 1))
        _tap(taps, f"{self.tag}.F12", f)
        f = _run(f"{self.tag}.stage3", self.stage3, torch.cat([f, s[2]], 1))
        _tap(taps, f"{self.tag}.F123", f)
        return _run(f"{self.tag}.reduce", self.reduce, f)


class RadicalInputTrunk(nn.Module):
    """All three scales concatenated as input channels."""

    tag = "RI"

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        w1, w2, w3 = widths
        self.stage1 = ConvBlock(3, w1)
        self.stage2 = ConvBlock(w1, w2)
        self.stage3 = ConvBlock(w2, w3)
        self.reduce = Reduce(w3)
        self.out_channels = w3

    def forward(self, x, taps=None):
        f = _run("RI.stage1", self.stage1, x)
        _tap(taps, "RI.F1", f)
        f = _run("RI.stage2", self.stage2, f)
        _tap(taps, "RI.F12", f)
        f = _run("RI.stage3", self.stage3, f)
        _tap(taps, "RI.F123", f)
        return _run("RI.reduce", self.reduce, f)


class LowLevelTrunk(nn.Module):
    """Per-scale first conv blocks merged by element-wise summation."""

    tag = "LR"

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        w1, w2, w3 = widths
        self.first = nn.ModuleList(ConvBlock(1, w1) for _ in range(3))
        self.stage2 = ConvBlock(w1, w2)
        self.stage3 = ConvBlock(w2, w3)
        self.reduce = Reduce(w3)
        self.out_channels = w3

    def forward(self, x, taps=None):
        f = None
        for i, block in enumerate(self.first):
            fi = _run(f"LR.first{i + 1}", block, x[:, i : i + 1])
            f = fi if f is None else f + fi
        _tap(taps, "LR.F1", f)
        f = _run("LR.stage2", self.stage2, f)
        _tap(taps, "LR.F12", f)
        f = _run("LR.stage3", self.stage3, f)
        _tap(taps, "LR.F123", f)
        return _run("LR.reduce", self.reduce, f)


def _tap(taps, name, value):
    if taps is not None and name in taps:
        taps[name] = value


@dataclass
class FeatureMap:
    """One sample's activations ``(C, z, y, x)`` tagged with the stage that made them."""

    values: np.ndarray
    stage_tag: str = ""

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape[1:])


def fuse_streams(a, b, mode: str, projection: Optional[nn.Conv3d] = None):
    """Merge two streams' maps by ``sum``, ``concat`` or a learned ``conv1x1``.

    Works on batched tensors ``(N, C, z, y, x)`` or on ``FeatureMap`` pairs.
    ``conv1x1`` projects the concatenation back to ``a``'s channel count and
    needs ``projection``.
    """
    if isinstance(a, FeatureMap) or isinstance(b, FeatureMap):
        ta = torch.as_tensor(np.asarray(a.values))[None]
        tb = torch.as_tensor(np.asarray(b.values))[None]
        with torch.no_grad():
            out = fuse_streams(ta, tb, mode, projection)
        return FeatureMap(out[0].numpy(), f"{a.stage_tag}|{b.stage_tag}:{mode}")
    if mode not in FUSIONS:
        raise ValueError(f"unknown fusion mode {mode!r}")
    if mode == "sum":
        if a.shape != b.shape:
            raise ShapeError(f"sum fusion needs identical shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
        return a + b
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"{mode} fusion needs identical spatial dims, got {tuple(a.shape)} and {tuple(b.shape)}")
    cat = torch.cat([a, b], 1)
    if mode == "concat":
        return cat
    if projection is None:
        raise ValueError("conv1x1 fusion needs a projection layer")
    if projection.in_channels != cat.shape[1] or projection.out_channels != a.shape[1]:
        raise ShapeError(
            f"projection maps {projection.in_channels}->{projection.out_channels}, "
            f"fusion needs {cat.shape[1]}->{a.shape[1]}"
        )
    return projection(cat)


class TwoStreamTrunk(nn.Module):
    tag = "MGI"

    def __init__(self, zoom_in: Sequence[int], zoom_out: Sequence[int], fusion: str):
        super().__init__()
        self.zoom_in = GradualStream(zoom_in, (0, 1, 2), "ZI")
        self.zoom_out = GradualStream(zoom_out, (2, 1, 0), "ZO")
        self.fusion = fusion
        a, b = self.zoom_in.out_channels, self.zoom_out.out_channels
        if fusion == "sum" and a != b:
            raise ShapeError(f"sum fusion needs equal stream widths, got {a} and {b}")
        self.projection = nn.Conv3d(a + b, a, kernel_size=1) if fusion == "conv1x1" else None
        self.out_channels = a + b if fusion == "concat" else a

    def forward(self, x, taps=None):
        a = self.zoom_in(x, taps)
        b = self.zoom_out(x, taps)
        return fuse_streams(a, b, self.fusion, self.projection)


class Head(nn.Sequential):
    def __init__(self, cin: int, config: ModelConfig):
        layers = []
        for c in config.head_channels:
            layers += [conv3(cin, c), nn.ReLU()]
            cin = c
        layers += [pool(), nn.Flatten()]
        z, y, x = (_pooled(n, 2) for n in PATCH_SHAPE)
        width = cin * z * y * x
        for w in config.fc_widths:
            layers += [nn.Linear(width, w), nn.ReLU(), nn.Dropout(config.dropout_rate)]
            width = w
        layers.append(nn.Linear(width, config.num_classes))
        super().__init__(*layers)


def _pooled(n: int, times: int) -> int:
    for _ in range(times):
        n = -(-n // 2)
    return n


class MultiScaleNet(nn.Module):
    """Trunk + head; ``forward`` returns logits, ``predict_proba`` softmax rows."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        v = config.variant
        widths = config.stage_channels
        if v == "MGI":
            self.trunk = TwoStreamTrunk(widths, config.zoom_out_channels or widths, config.fusion)
        elif v == "ZI":
            self.trunk = GradualStream(widths, (0, 1, 2), "ZI")
        elif v == "ZO":
            self.trunk = GradualStream(widths, (2, 1, 0), "ZO")
        elif v == "RI":
            self.trunk = RadicalInputTrunk(widths)
        else:
            self.trunk = LowLevelTrunk(widths)
        self.head = Head(self.trunk.out_channels, config)

    @property
    def stage_tags(self) -> list[str]:
        if self.config.variant == "MGI":
            return [f"{s}.{n}" for s in ("ZI", "ZO") for n in STAGE_NAMES]
        return [f"{self.trunk.tag}.{n}" for n in STAGE_NAMES]

    def forward(self, x, taps: Optional[dict] = None):
        expected = (3,) + PATCH_SHAPE
        if x.dim() != 5 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"layer 'input' expects (N, {', '.join(map(str, expected))}), got {tuple(x.shape)}")
        x = x.contiguous(memory_format=_MEMORY_FORMAT)
        f = self.trunk(x, taps)
        return _run("head", self.head, f)


def build(config: ModelConfig = None, seed: int = 0) -> MultiScaleNet:
    """Instantiate a network for ``config`` with Xavier weights drawn from ``seed``."""
    config = config or ModelConfig()
    model = MultiScaleNet(config)
    init_module(model, seed)
    return model.to(memory_format=_MEMORY_FORMAT)


def as_batch(batch) -> torch.Tensor:
    """Stack PatchTriples (or pass through an array) into ``(N, 3, z, y, x)``."""
    if isinstance(batch, PatchTriple):
        batch = [batch]
    if isinstance(batch, (list, tuple)):
        if not batch:
            raise ValueError("empty batch")
        arr = np.stack([b.stacked() if isinstance(b, PatchTriple) else np.asarray(b) for b in batch])
    else:
        arr = np.asarray(batch)
    if arr.shape[0] == 0:
        raise ValueError("empty batch")
    return torch.as_tensor(np.ascontiguousarray(arr, dtype=np.float32))


@torch.no_grad()
def forward(model: MultiScaleNet, batch, batch_size: int = 256) -> np.ndarray:
    """Inference-mode class probabilities, shape ``(N, 2)``; column 1 is nodule."""
    x = as_batch(batch)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        out = [
            F.softmax(model(x[i : i + batch_size].to(dtype)), dim=1).double().numpy()
            for i in range(0, len(x), batch_size)
        ]
    finally:
        model.train(was_training)
    return np.concatenate(out)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


@torch.no_grad()
def dump_feature_maps(model: MultiScaleNet, x, stage_tags: Iterable[str]) -> dict[str, FeatureMap]:
    """Pre-pooling activations (e.g. ``ZI.F1``) for a single sample."""
    tags = list(stage_tags)
    unknown = sorted(set(tags) - set(model.stage_tags))
    if unknown:
        raise KeyError(f"unknown stage tags {unknown}; available: {model.stage_tags}")
    if not tags:
        return {}
    taps = {t: None for t in tags}
    was_training = model.training
    model.eval()
    try:
        batch = as_batch(x)[:1].to(next(model.parameters()).dtype)
        model(batch, taps)
    finally:
        model.train(was_training)
    return {t: FeatureMap(taps[t][0].contiguous().float().numpy(), t) for t in tags}


# --------------------------------------------------------------------------
# tensor container
#
# layout: magic (8 bytes) | u64 LE header length | UTF-8 JSON header |
# tensors as raw little-endian float32, in header order.


def write_tensor_container(path, tensors: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = dict(meta, format_version=CHECKPOINT_VERSION, tensors=entries)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    return path


def read_tensor_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a tensor container")
    (n,) = struct.unpack_from("<Q", blob, len(CHECKPOINT_MAGIC))
    start = len(CHECKPOINT_MAGIC) + 8
    header = json.loads(blob[start : start + n].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported container version {header.get('format_version')}")
    base = start + n
    tensors = {}
    for e in header["tensors"]:
        raw = blob[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return header, tensors


def save_checkpoint(model: MultiScaleNet, path, extra: Optional[dict] = None) -> Path:
    tensors = {k: v.detach().cpu().contiguous().numpy() for k, v in model.state_dict().items()}
    meta = {"kind": "checkpoint", "config": model.config.to_dict(), "extra": extra or {}}
    return write_tensor_container(path, tensors, meta)


def load_checkpoint(path) -> tuple[MultiScaleNet, dict]:
    header, tensors = read_tensor_container(path)
    if header.get("kind") != "checkpoint":
        raise ValueError(f"{path}: container holds {header.get('kind')!r}, not a checkpoint")
    model = MultiScaleNet(ModelConfig.from_dict(header["config"])).to(memory_format=_MEMORY_FORMAT)
    state = model.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks tensors {sorted(missing)}")
    model.load_state_dict({k: torch.from_numpy(tensors[k].copy()) for k in state})
    return model, header.get("extra", {})


def save_feature_maps(maps: dict[str, FeatureMap], path) -> Path:
    return write_tensor_container(path, {k: m.values for k, m in maps.items()}, {"kind": "feature_maps"})
