"""Channel statistics and feature stylization.

Feature maps are torch tensors shaped ``[C, H, W]`` or batched ``[N, C, H, W]``.
Statistics are taken over the two trailing spatial axes with the population
(divide-by-N) estimator.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DataIntegrityError, ShapeError

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and standard deviation, shaped ``[..., C]``."""

    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ShapeError(f"mean {tuple(self.mean.shape)} and std {tuple(self.std.shape)} differ")

    @property
    def channels(self) -> int:
        return self.mean.shape[-1]

    def detach(self) -> "ChannelStats":
        return ChannelStats(self.mean.detach(), self.std.detach())

    def scaled(self, mean_factor: torch.Tensor, std_factor: torch.Tensor) -> "ChannelStats":
        return ChannelStats(self.mean * mean_factor, self.std * std_factor)


def _as_map(fm) -> torch.Tensor:
    fm = torch.as_tensor(fm)
    if not fm.is_floating_point():
        fm = fm.to(torch.get_default_dtype())
    if fm.dim() not in (3, 4) or min(fm.shape) < 1:
        raise ShapeError(f"expected a [C,H,W] or [N,C,H,W] feature map, got shape {tuple(fm.shape)}")
    return fm


def _moments(fm: torch.Tensor, eps: float):
    mean = fm.mean(dim=(-2, -1), keepdim=True)
    var = (fm - mean).pow(2).mean(dim=(-2, -1), keepdim=True)
    # sqrt(max(var, eps^2)) == max(std, eps) but keeps a finite gradient at var == 0
    return mean, var, var.clamp_min(eps * eps).sqrt()


def channel_stats(fm, *, check_finite: bool = True) -> ChannelStats:
    """Population mean/std of every channel of ``fm``."""
    fm = _as_map(fm)
    if check_finite and not torch.isfinite(fm).all():
        raise DataIntegrityError("feature map contains non-finite values")
    mean, var, _ = _moments(fm, 0.0)
    return ChannelStats(mean[..., 0, 0], var.sqrt()[..., 0, 0])


def stylize(source, wild_stats: ChannelStats, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Re-normalize each channel of ``source`` to the target ``wild_stats``.

    ``out = std_w * (source - mean_s) / max(std_s, eps) + mean_w``.

    The target statistics are detached: no gradient flows into whatever
    produced them. Gradients do flow through the source statistics. A new
    tensor is returned and ``source`` is left untouched.
    """
    source = _as_map(source)
    if wild_stats.mean.shape != source.shape[:-2]:
        raise ShapeError(
            f"stats shaped {tuple(wild_stats.mean.shape)} do not match feature map "
            f"{tuple(source.shape)}"
        )
    mean, _, std = _moments(source, eps)
    target = wild_stats.detach()
    return target.std[..., None, None] * (source - mean) / std + target.mean[..., None, None]


def random_stats(fm, generator: torch.Generator, low: float = 0.5, high: float = 1.5) -> ChannelStats:
    """Statistics of ``fm`` with mean and std each multiplied by factors drawn from U[low, high].

    Stand-in for wild statistics when stylization runs without wild images.
    """
    stats = channel_stats(fm, check_finite=False).detach()
    shape = stats.mean.shape

    def draw():
        u = torch.rand(shape, generator=generator, dtype=torch.float64)
        return (low + (high - low) * u).to(stats.mean.dtype)

    return stats.scaled(draw(), draw())
