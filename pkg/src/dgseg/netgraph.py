"""Network assembly: staged feature extractor with stylization hook points,
segmentation classifier and projection head, plus the three-branch training
forward pass, inference stripping and checkpoint files.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .embed import ProjectedGrid, ProjectionHead, normalize_grid
from .errors import ConfigError, DataIntegrityError, ShapeError
from .featstats import ChannelStats, channel_stats, random_stats, stylize

Hook = Callable[[str, torch.Tensor], torch.Tensor]


class StagedBackbone(nn.Module):
    """Feature extractor made of named sequential stages.

    A hook, when given, sees the output of every stage and returns what is
    fed to the next one. ``stride`` is the input-to-feature downsampling.
    """

    def __init__(self, stages: dict[str, nn.Module], out_channels: int, stride: int):
        super().__init__()
        self.stages = nn.ModuleDict(stages)
        self.out_channels = out_channels
        self.stride = stride

    @property
    def hook_names(self) -> list[str]:
        return list(self.stages.keys())

    def forward(self, x: torch.Tensor, hook: Hook | None = None) -> torch.Tensor:
        for name, stage in self.stages.items():
            x = stage(x)
            if hook is not None:
                x = hook(name, x)
        return x


class ResidualBlock(nn.Module):
    """``relu(x + conv(relu(conv(x))))`` with matching channels."""

    def __init__(self, channels: int, dilation: int = 1, norm: bool = False):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.bn1 = nn.BatchNorm2d(channels) if norm else nn.Identity()
        self.bn2 = nn.BatchNorm2d(channels) if norm else nn.Identity()

    def forward(self, x):
        return F.relu(x + self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x))))))


def _down(cin, cout, stride, norm=False):
    layers = [nn.Conv2d(cin, cout, 3, stride=stride, padding=1)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    return layers + [nn.ReLU(inplace=True)]


def conv_backbone(widths: Sequence[int] = (16, 24, 32, 48, 48), norm: bool = False) -> StagedBackbone:
    """Small residual encoder with output stride 4.

    Stages ``stem`` (1x), ``enc1`` (2x), ``enc2`` (4x), ``enc3`` (4x, dilation 2)
    and ``context`` (4x, dilation 4); each stage past the stem is a strided or
    width-changing conv followed by a residual block.
    """
    if len(widths) != 5:
        raise ConfigError("conv_backbone needs exactly five stage widths")
    w0, w1, w2, w3, w4 = widths
    stages = {
        "stem": nn.Sequential(*_down(3, w0, 1, norm)),
        "enc1": nn.Sequential(*_down(w0, w1, 2, norm), ResidualBlock(w1, 1, norm)),
        "enc2": nn.Sequential(*_down(w1, w2, 2, norm), ResidualBlock(w2, 1, norm)),
        "enc3": nn.Sequential(*_down(w2, w3, 1, norm), ResidualBlock(w3, 2, norm)),
        "context": nn.Sequential(*_down(w3, w4, 1, norm), ResidualBlock(w4, 4, norm)),
    }
    backbone = StagedBackbone(stages, out_channels=w4, stride=4)
    # no normalization layers: He init on the plain convs, residual branches start near zero
    for m in backbone.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
        if isinstance(m, ResidualBlock):
            m.conv2.weight.data.mul_(0.1)
    return backbone


# Where stylization sits when a ResNet-style backbone with these hook names is plugged in:
# replacing the first batch norm, and after the residual addition of the first two blocks.
RESNET_FS_HOOKS = ("bn1", "layer1.0", "layer1.1")


@dataclass
class BranchOutputs:
    """Outputs of one training forward pass. Logits are at input resolution."""

    logits_src: torch.Tensor
    logits_stylized: torch.Tensor
    proj_src: ProjectedGrid
    proj_stylized: ProjectedGrid
    proj_wild: ProjectedGrid
    wild_stats: dict[str, ChannelStats]

    @property
    def p_src(self) -> torch.Tensor:
        return F.softmax(self.logits_src, dim=1)

    @property
    def p_stylized(self) -> torch.Tensor:
        return F.softmax(self.logits_stylized, dim=1)


class Segmenter(nn.Module):
    """Backbone + classifier: the part of the network kept for inference."""

    def __init__(self, backbone: StagedBackbone, classifier: nn.Module):
        super().__init__()
        self.backbone = backbone
        self.classifier = classifier

    def logits(self, x: torch.Tensor, hook: Hook | None = None) -> torch.Tensor:
        return self.head(self.backbone(x, hook), x.shape[-2:])

    def head(self, feat: torch.Tensor, size) -> torch.Tensor:
        out = self.classifier(feat)
        return F.interpolate(out, size=tuple(size), mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Per-pixel class probabilities ``[N, K, H, W]``."""
        return F.softmax(self.logits(x), dim=1)

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self.logits(x).argmax(dim=1)


class NetworkAssembly(nn.Module):
    def __init__(
        self,
        backbone: StagedBackbone,
        num_classes: int,
        proj_dim: int = 256,
        proj_hidden: int | None = None,
        fs_hooks: Sequence[str] = ("stem", "enc1"),
        fs_depth: int = 3,
        fs_mode: str = "wild",
        fs_eps: float = 1e-5,
    ):
        super().__init__()
        names = backbone.hook_names
        allowed = names[:fs_depth]
        for h in fs_hooks:
            if h not in allowed:
                raise ConfigError(f"stylization hook {h!r} not among the first {fs_depth} stages {allowed}")
        if fs_mode not in ("wild", "random"):
            raise ConfigError(f"fs_mode must be 'wild' or 'random', not {fs_mode!r}")
        self.backbone = backbone
        self.classifier = nn.Conv2d(backbone.out_channels, num_classes, 1)
        self.projector = ProjectionHead(backbone.out_channels, proj_dim, proj_hidden)
        self.num_classes = num_classes
        self.fs_hooks = [h for h in names if h in set(fs_hooks)]
        self.fs_mode = fs_mode
        self.fs_eps = fs_eps

    def segmenter(self) -> Segmenter:
        """Backbone + classifier view sharing parameters with this assembly."""
        return Segmenter(self.backbone, self.classifier)

    def _project(self, feat: torch.Tensor) -> ProjectedGrid:
        return normalize_grid(ProjectedGrid(self.projector(feat)))

    def forward_training(self, x_source: torch.Tensor, x_wild: torch.Tensor,
                         generator: torch.Generator | None = None) -> BranchOutputs:
        """Wild pass (recording statistics), plain source pass, stylized source pass.

        The wild pass runs without gradient: its statistics and projections
        only ever serve as constants. Stylization is skipped in eval mode.
        """
        if x_source.shape != x_wild.shape:
            raise ShapeError(f"source {tuple(x_source.shape)} and wild {tuple(x_wild.shape)} differ")
        seg = self.segmenter()
        hooks = set(self.fs_hooks) if self.training else set()
        wild_stats: dict[str, ChannelStats] = {}

        def record(name, z):
            if name in hooks:
                wild_stats[name] = channel_stats(z, check_finite=False)
            return z

        with torch.no_grad():
            proj_wild = self._project(self.backbone(x_wild, record))

        feat = self.backbone(x_source)
        if not torch.isfinite(feat).all():
            raise DataIntegrityError("non-finite backbone features")
        logits_src = seg.head(feat, x_source.shape[-2:])
        proj_src = self._project(feat)

        if not hooks:
            return BranchOutputs(logits_src, logits_src, proj_src, proj_src, proj_wild, wild_stats)

        def swap(name, z):
            if name not in hooks:
                return z
            if self.fs_mode == "random":
                target = random_stats(z, generator if generator is not None else torch.default_generator)
            else:
                target = wild_stats[name]
            return stylize(z, target, self.fs_eps)

        feat_sw = self.backbone(x_source, swap)
        return BranchOutputs(
            logits_src,
            seg.head(feat_sw, x_source.shape[-2:]),
            proj_src,
            self._project(feat_sw),
            proj_wild,
            wild_stats,
        )


def strip_for_inference(assembly: NetworkAssembly) -> Segmenter:
    """Independent copy of backbone + classifier; stylization hooks and projector are dropped."""
    model = Segmenter(copy.deepcopy(assembly.backbone), copy.deepcopy(assembly.classifier))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# checkpoint files: one .npz holding named float arrays plus a JSON metadata entry

META_KEY = "__meta__"


def config_digest(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if META_KEY in arrays:
        raise ValueError(f"{META_KEY} is reserved")
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays, **{META_KEY: blob})
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files if k != META_KEY}
        meta = json.loads(bytes(data[META_KEY]).decode())
    return arrays, meta


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state, strict=True)


def save_inference_checkpoint(path, model: Segmenter, meta: dict) -> Path:
    meta = dict(meta, kind="inference")
    return save_checkpoint(path, module_arrays(model, "model."), meta)
