import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dgseg.embed import (
    ProjectedGrid,
    ProjectionHead,
    lattice,
    normalize_grid,
    random_subsample,
    take,
    uniform_subsample,
)
from dgseg.errors import DataIntegrityError, ParameterError


def grid_of(vectors_hw):
    """[H, W, C] nested list -> ProjectedGrid [C, H, W]."""
    v = torch.tensor(vectors_hw, dtype=torch.float64).permute(2, 0, 1)
    return ProjectedGrid(v)


def test_normalize_examples():
    g = normalize_grid(grid_of([[[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]]]))
    px = g.pixels().numpy()
    np.testing.assert_allclose(px[0], [0.6, 0.8])
    np.testing.assert_array_equal(px[1], [0.0, 0.0])
    np.testing.assert_allclose(px[2], [1.0, 0.0], atol=1e-7)


def test_normalize_rejects_non_finite():
    with pytest.raises(DataIntegrityError):
        normalize_grid(ProjectedGrid(torch.tensor([[[float("nan")]]])))


def test_normalized_norms_invariant(rng):
    v = torch.from_numpy(rng.normal(size=(2, 8, 5, 5)))
    v[0, :, 1, 1] = 0
    norms = normalize_grid(ProjectedGrid(v)).values.norm(dim=1)
    zero = norms == 0
    assert zero.sum() == 1
    assert ((norms[~zero] - 1).abs() <= 1e-5).all()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3), st.floats(0.01, 100))
def test_normalize_scale_invariant_and_idempotent(vec, k):
    v = torch.tensor(vec, dtype=torch.float64).reshape(3, 1, 1)
    if v.norm() < 1e-6:
        return
    a = normalize_grid(ProjectedGrid(v)).values
    b = normalize_grid(ProjectedGrid(v * k)).values
    torch.testing.assert_close(a, b, rtol=1e-9, atol=1e-12)
    torch.testing.assert_close(normalize_grid(ProjectedGrid(a)).values, a, rtol=1e-12, atol=1e-12)


def test_lattice_examples():
    np.testing.assert_array_equal(lattice(4, 2), [1, 3])
    np.testing.assert_array_equal(lattice(192, 64), 3 * np.arange(64) + 1)
    np.testing.assert_array_equal(lattice(7, 7), np.arange(7))


def test_subsample_192_to_64_every_third():
    g = ProjectedGrid(torch.arange(192 * 192, dtype=torch.float32).reshape(1, 192, 192))
    s = uniform_subsample(g, 64, 64)
    assert s.values.shape == (1, 64, 64)
    rows = s.index_map[:, 0].reshape(64, 64)[:, 0]
    np.testing.assert_array_equal(rows, np.arange(1, 192, 3))
    assert s.values[0, 2, 5] == (3 * 2 + 1) * 192 + (3 * 5 + 1)


def test_subsample_identity_and_4x4():
    v = torch.randn(3, 4, 4)
    s = uniform_subsample(ProjectedGrid(v), 4, 4)
    assert torch.equal(s.values, v)
    assert s.index_map.tolist() == [[r, c] for r in range(4) for c in range(4)]
    s2 = uniform_subsample(ProjectedGrid(v), 2, 2)
    assert s2.index_map.tolist() == [[1, 1], [1, 3], [3, 1], [3, 3]]
    assert torch.equal(s2.values, v[:, [1, 3]][:, :, [1, 3]])


def test_subsample_too_large():
    with pytest.raises(ParameterError):
        uniform_subsample(ProjectedGrid(torch.zeros(1, 3, 3)), 4, 2)


def test_index_map_row_major_increasing():
    s = uniform_subsample(ProjectedGrid(torch.zeros(2, 50, 37)), 16, 10)
    flat = s.index_map[:, 0] * 37 + s.index_map[:, 1]
    assert np.all(np.diff(flat) > 0)
    assert len(s.index_map) == 160


def test_alignment_between_grids():
    a = uniform_subsample(ProjectedGrid(torch.randn(4, 24, 24)), 8, 8)
    b = uniform_subsample(ProjectedGrid(torch.randn(4, 24, 24)), 8, 8)
    np.testing.assert_array_equal(a.index_map, b.index_map)


def test_subsample_commutes_with_normalize(rng):
    g = ProjectedGrid(torch.from_numpy(rng.normal(size=(2, 6, 12, 12))))
    x = normalize_grid(uniform_subsample(g, 5, 7)).values
    y = uniform_subsample(normalize_grid(g), 5, 7).values
    torch.testing.assert_close(x, y)


def test_random_subsample_seeded_and_sorted():
    g = ProjectedGrid(torch.randn(3, 10, 10))
    a = random_subsample(g, 4, 4, np.random.default_rng(5))
    b = random_subsample(g, 4, 4, np.random.default_rng(5))
    np.testing.assert_array_equal(a.index_map, b.index_map)
    flat = a.index_map[:, 0] * 10 + a.index_map[:, 1]
    assert len(set(flat.tolist())) == 16 and np.all(np.diff(flat) > 0)
    r, c = a.index_map[3]
    assert torch.equal(a.values[:, 0, 3], g.values[:, r, c])


def test_take_aligns_with_random_sample():
    src, sty = ProjectedGrid(torch.randn(2, 3, 9, 9)), ProjectedGrid(torch.randn(2, 3, 9, 9))
    a = random_subsample(src, 3, 3, np.random.default_rng(0))
    p = take(sty, a.index_map, 3, 3)
    for k, (r, c) in enumerate(a.index_map):
        assert torch.equal(p.values[:, :, k // 3, k % 3], sty.values[:, :, r, c])


def test_projection_head_shape():
    head = ProjectionHead(32, 16)
    out = head(torch.randn(2, 32, 6, 6))
    assert out.shape == (2, 16, 6, 6)
    assert sum(p.numel() for p in head.parameters()) == 32 * 32 + 32 + 32 * 16 + 16
