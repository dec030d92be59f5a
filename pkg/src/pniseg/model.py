"""Feature Pyramid Network for single-class boundary segmentation.

The network is an encoder producing C2..C5 feature maps (strides 4, 8, 16,
32) followed by the usual segmentation FPN decoder: 1x1 laterals, a
nearest-neighbour top-down pathway, 3x3 smoothing, per-level heads summed at
stride 4, a fusion conv and a 1x1 classifier whose logits are bilinearly
upsampled back to the input extent.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, NumericError

ENCODERS = ("tiny", "effnet_b0_like")
DEEPEST_STRIDE = 32


@dataclass
class FpnConfig:
    encoder: str = "tiny"
    pyramid_channels: int = 128
    head_channels: int = 64
    encoder_width: float = 1.0
    levels: tuple[int, ...] = (2, 3, 4, 5)
    input_channels: int = 3
    output_channels: int = 1

    def __post_init__(self):
        self.levels = tuple(self.levels)
        if self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.encoder!r}; choose from {ENCODERS}")
        if self.levels != (2, 3, 4, 5):
            raise ConfigError("only the C2..C5 pyramid is supported")
        if self.input_channels != 3 or self.output_channels != 1:
            raise ConfigError("the model maps RGB input to a single logit channel")
        if min(self.pyramid_channels, self.head_channels) < 1 or self.encoder_width <= 0:
            raise ConfigError("channel counts must be positive")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def conv_bn_act(cin: int, cout: int, k: int = 3, stride: int = 1, groups: int = 1, act: bool = True):
    layers = [nn.Conv2d(cin, cout, k, stride, k // 2, groups=groups, bias=False), nn.BatchNorm2d(cout)]
    if act:
        layers.append(nn.SiLU())
    return nn.Sequential(*layers)


def _scaled(c: int, width: float) -> int:
    return max(4, int(round(c * width)))


class TinyEncoder(nn.Module):
    """A stride-2 stem and four downsampling double-conv blocks."""

    base = (16, 32, 64, 128)

    def __init__(self, width: float = 1.0):
        super().__init__()
        chans = [_scaled(c, width) for c in self.base]
        self.stem = conv_bn_act(3, chans[0], stride=2)
        blocks, cin = [], chans[0]
        for c in chans:
            blocks.append(nn.Sequential(conv_bn_act(cin, c, stride=2), conv_bn_act(c, c)))
            cin = c
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = tuple(chans)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for blk in self.blocks:
            x = blk(x)
            feats.append(x)
        return feats


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduced: int):
        super().__init__()
        self.reduce = nn.Conv2d(channels, reduced, 1)
        self.expand = nn.Conv2d(reduced, channels, 1)

    def forward(self, x):
        s = x.mean((2, 3), keepdim=True)
        return x * torch.sigmoid(self.expand(F.silu(self.reduce(s))))


class MBConv(nn.Module):
    def __init__(self, cin: int, cout: int, expand: int, k: int, stride: int):
        super().__init__()
        mid = cin * expand
        layers = [] if expand == 1 else [conv_bn_act(cin, mid, 1)]
        layers += [
            conv_bn_act(mid, mid, k, stride, groups=mid),
            SqueezeExcite(mid, max(1, cin // 4)),
            conv_bn_act(mid, cout, 1, act=False),
        ]
        self.body = nn.Sequential(*layers)
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        y = self.body(x)
        return x + y if self.residual else y


class EffNetB0LikeEncoder(nn.Module):
    """Inverted-residual stages following the EfficientNet-B0 layout, untrained."""

    # (expand, kernel, stride, channels, repeats)
    stages = (
        (1, 3, 1, 16, 1),
        (6, 3, 2, 24, 2),
        (6, 5, 2, 40, 2),
        (6, 3, 2, 80, 3),
        (6, 5, 1, 112, 3),
        (6, 5, 2, 192, 4),
        (6, 3, 1, 320, 1),
    )
    taps = (1, 2, 4, 6)  # stage indices emitting C2..C5

    def __init__(self, width: float = 1.0):
        super().__init__()
        cin = _scaled(32, width)
        self.stem = conv_bn_act(3, cin, stride=2)
        stages = []
        for expand, k, stride, c, n in self.stages:
            cout = _scaled(c, width)
            blocks = []
            for i in range(n):
                blocks.append(MBConv(cin, cout, expand, k, stride if i == 0 else 1))
                cin = cout
            stages.append(nn.Sequential(*blocks))
        self.stages_ = nn.ModuleList(stages)
        self.out_channels = tuple(_scaled(self.stages[i][3], width) for i in self.taps)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for i, stage in enumerate(self.stages_):
            x = stage(x)
            if i in self.taps:
                feats.append(x)
        return feats


class FPN(nn.Module):
    def __init__(self, cfg: FpnConfig):
        super().__init__()
        self.cfg = cfg
        enc_cls = TinyEncoder if cfg.encoder == "tiny" else EffNetB0LikeEncoder
        self.encoder = enc_cls(cfg.encoder_width)
        p, hc = cfg.pyramid_channels, cfg.head_channels
        self.lateral = nn.ModuleList(nn.Conv2d(c, p, 1) for c in self.encoder.out_channels)
        self.smooth = nn.ModuleList(nn.Conv2d(p, p, 3, padding=1) for _ in self.encoder.out_channels)
        self.heads = nn.ModuleList(conv_bn_act(p, hc) for _ in self.encoder.out_channels)
        self.fuse = conv_bn_act(hc, hc)
        self.classifier = nn.Conv2d(hc, cfg.output_channels, 1)

    def pyramid(self, x):
        feats = self.encoder(x)
        lat = [conv(f) for conv, f in zip(self.lateral, feats)]
        for i in range(len(lat) - 1, 0, -1):
            lat[i - 1] = lat[i - 1] + F.interpolate(lat[i], size=lat[i - 1].shape[2:], mode="nearest")
        return [conv(f) for conv, f in zip(self.smooth, lat)]

    def forward(self, x):
        levels = self.pyramid(x)
        size = levels[0].shape[2:]
        y = self.heads[0](levels[0])
        for head, f in zip(self.heads[1:], levels[1:]):
            y = y + F.interpolate(head(f), size=size, mode="bilinear", align_corners=False)
        # The 1x1 classifier commutes with bilinear upsampling, so it runs at stride 4.
        logits = self.classifier(self.fuse(y))
        return F.interpolate(logits, size=x.shape[2:], mode="bilinear", align_corners=False)


ModelParams = OrderedDict  # name -> tensor, in module state order


def build_model(cfg: FpnConfig, params=None) -> FPN:
    net = FPN(cfg)
    if params is not None:
        net.load_state_dict(params)
    return net


def init_params(cfg: FpnConfig, seed: int) -> ModelParams:
    """Deterministic He-normal (fan-in) conv weights, zero biases, unit BN scales."""
    gen = torch.Generator().manual_seed(int(seed))
    net = FPN(cfg)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
    return OrderedDict((k, v.clone()) for k, v in net.state_dict().items())


def parameter_count(cfg: FpnConfig) -> int:
    return sum(p.numel() for p in FPN(cfg).parameters())


def check_input(cfg: FpnConfig, batch) -> None:
    shape = tuple(batch.shape)
    if len(shape) != 4 or shape[-1] != cfg.input_channels:
        raise ConfigError(f"expected an (N, H, W, {cfg.input_channels}) batch, got {shape}")
    h, w = shape[1:3]
    if h % DEEPEST_STRIDE or w % DEEPEST_STRIDE:
        raise ConfigError(f"input extent {h}x{w} is not divisible by {DEEPEST_STRIDE}")


def to_nchw(batch: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def forward(params, cfg: FpnConfig, batch: np.ndarray, net: FPN | None = None) -> np.ndarray:
    """Eval-mode logits ``(N, H, W)`` for an ``(N, H, W, 3)`` float batch."""
    check_input(cfg, batch)
    if net is None:
        net = build_model(cfg, params)
    net.eval()
    with torch.no_grad():
        out = net(to_nchw(batch))
    return out[:, 0].numpy()


class LossValue(NamedTuple):
    total: torch.Tensor
    bce: torch.Tensor
    dice: torch.Tensor


DICE_EPS = 1.0


def bce_dice_loss(logits: torch.Tensor, targets: torch.Tensor, eps: float = DICE_EPS) -> LossValue:
    """Mean BCE plus ``1 - soft Dice``, the Dice computed over the whole batch."""
    if logits.shape != targets.shape:
        raise ConfigError(f"logit shape {tuple(logits.shape)} != target shape {tuple(targets.shape)}")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits reached the loss")
    targets = targets.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, targets)
    p = torch.sigmoid(logits)
    dice = (2.0 * (p * targets).sum() + eps) / (p.sum() + targets.sum() + eps)
    dice_term = 1.0 - dice
    return LossValue(bce + dice_term, bce, dice_term)


# -- checkpoint files -------------------------------------------------------

MAGIC = b"PNISEG-CKPT\x00"


@dataclass
class Checkpoint:
    params: ModelParams
    model_cfg: FpnConfig
    meta: dict = field(default_factory=dict)

    def build(self) -> FPN:
        net = build_model(self.model_cfg, self.params)
        net.eval()
        return net


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Header (JSON: config hash, encoder, tensor manifest, metadata) then LE f32 payloads."""
    manifest = []
    payloads = []
    for name, t in ckpt.params.items():
        arr = t.detach().cpu().numpy()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        payloads.append(arr.astype("<f4").tobytes())
    header = {
        "config_hash": ckpt.model_cfg.digest(),
        "encoder": ckpt.model_cfg.encoder,
        "model_cfg": asdict(ckpt.model_cfg),
        "tensors": manifest,
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + n])
    pos += n
    cfg = FpnConfig(**header["model_cfg"])
    if cfg.digest() != header["config_hash"]:
        raise DataError(f"{path}: config hash mismatch")
    params = OrderedDict()
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(entry["shape"])
        pos += 4 * count
        params[entry["name"]] = torch.from_numpy(arr.astype(entry["dtype"]))
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes")
    return Checkpoint(params, cfg, header.get("meta", {}))
