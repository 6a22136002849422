"""Projection-head outputs: L2 normalization, lattice subsampling and the head itself."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .errors import DataIntegrityError, ParameterError, ShapeError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class ProjectedGrid:
    """Per-pixel embeddings shaped ``[C, H, W]`` or ``[N, C, H, W]``.

    ``index_map`` holds the ``(row, col)`` coordinate in the source grid of
    every pixel, row-major, when the grid was produced by subsampling.
    """

    values: torch.Tensor
    norm_eps: float = NORM_EPS
    index_map: np.ndarray | None = None

    def __post_init__(self):
        if self.values.dim() not in (3, 4):
            raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {tuple(self.values.shape)}")
        if self.index_map is not None and len(self.index_map) != self.height * self.width:
            raise ShapeError("index_map length must equal height * width")

    @property
    def channels(self) -> int:
        return self.values.shape[-3]

    @property
    def height(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]

    def pixels(self) -> torch.Tensor:
        """Embeddings as rows: ``[H*W, C]`` (or ``[N, H*W, C]``), row-major pixel order."""
        return self.values.flatten(-2).transpose(-1, -2)


def normalize_grid(grid: ProjectedGrid) -> ProjectedGrid:
    """Divide every pixel vector by ``max(||v||_2, norm_eps)``."""
    v = grid.values
    if not torch.isfinite(v).all():
        raise DataIntegrityError("projected grid contains non-finite values")
    norm = v.norm(dim=-3, keepdim=True).clamp_min(grid.norm_eps)
    return replace(grid, values=v / norm)


def lattice(size: int, out: int) -> np.ndarray:
    """Half-cell-offset uniform lattice: ``floor((i + 0.5) * size / out)`` for i < out."""
    i = np.arange(out)
    return np.floor((i + 0.5) * size / out).astype(np.int64)


def _compose(grid: ProjectedGrid, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    coords = np.stack([rows, cols], axis=1)
    if grid.index_map is not None:
        # coordinates are expressed in the grid this one was itself sampled from
        flat = rows * grid.width + cols
        coords = grid.index_map[flat]
    return coords


def uniform_subsample(grid: ProjectedGrid, out_h: int, out_w: int) -> ProjectedGrid:
    if not (1 <= out_h <= grid.height and 1 <= out_w <= grid.width):
        raise ParameterError(
            f"cannot sample {out_h}x{out_w} from a {grid.height}x{grid.width} grid"
        )
    rows, cols = lattice(grid.height, out_h), lattice(grid.width, out_w)
    values = grid.values[..., torch.as_tensor(rows)[:, None], torch.as_tensor(cols)[None, :]]
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ProjectedGrid(values, grid.norm_eps, _compose(grid, rr.ravel(), cc.ravel()))


def random_subsample(grid: ProjectedGrid, out_h: int, out_w: int, rng: np.random.Generator) -> ProjectedGrid:
    """Seeded choice of ``out_h*out_w`` positions without replacement, kept in row-major order."""
    if not (1 <= out_h <= grid.height and 1 <= out_w <= grid.width):
        raise ParameterError(
            f"cannot sample {out_h}x{out_w} from a {grid.height}x{grid.width} grid"
        )
    flat = np.sort(rng.choice(grid.height * grid.width, size=out_h * out_w, replace=False))
    rows, cols = flat // grid.width, flat % grid.width
    values = grid.values[..., torch.as_tensor(rows), torch.as_tensor(cols)]
    values = values.unflatten(-1, (out_h, out_w))
    return ProjectedGrid(values, grid.norm_eps, _compose(grid, rows, cols))


def take(grid: ProjectedGrid, index_map: np.ndarray, out_h: int, out_w: int) -> ProjectedGrid:
    """Gather ``grid`` at the coordinates of another grid's ``index_map`` so the two stay pixel-aligned."""
    if grid.index_map is not None:
        raise ParameterError("take() expects a grid that has not been subsampled")
    rows, cols = torch.as_tensor(index_map[:, 0]), torch.as_tensor(index_map[:, 1])
    values = grid.values[..., rows, cols].unflatten(-1, (out_h, out_w))
    return ProjectedGrid(values, grid.norm_eps, np.asarray(index_map).copy())


class ProjectionHead(nn.Module):
    """Two pointwise convolutions with a ReLU in between."""

    def __init__(self, in_channels: int, out_channels: int = 256, hidden: int | None = None):
        super().__init__()
        hidden = hidden or in_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, out_channels, 1),
        )
        self.out_channels = out_channels

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)
