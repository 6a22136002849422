import numpy as np
import pytest
import torch
from torch import nn

from dgseg.errors import ConfigError, ShapeError
from dgseg.netgraph import (
    NetworkAssembly,
    StagedBackbone,
    conv_backbone,
    count_parameters,
    load_checkpoint,
    load_module_arrays,
    save_checkpoint,
    save_inference_checkpoint,
    strip_for_inference,
)
from oracles import channel_stats_loop


def small_assembly(fs_hooks=("stem", "enc1"), seed=0, **kw):
    torch.manual_seed(seed)
    return NetworkAssembly(conv_backbone((8, 8, 12, 12, 12)), num_classes=3, proj_dim=6, fs_hooks=fs_hooks, **kw)


def images(n=2, size=24, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g)


def test_output_shapes():
    m = small_assembly()
    out = m.forward_training(images(), images(seed=1))
    assert out.logits_src.shape == (2, 3, 24, 24)
    assert out.proj_src.values.shape == (2, 6, 6, 6)
    norms = out.proj_wild.values.norm(dim=1)
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)
    torch.testing.assert_close(out.p_src.sum(1), torch.ones(2, 24, 24))


def test_no_hooks_means_identical_branches():
    m = small_assembly(fs_hooks=())
    out = m.forward_training(images(), images(seed=1))
    assert torch.equal(out.logits_src, out.logits_stylized)
    assert torch.equal(out.proj_src.values, out.proj_stylized.values)


def test_same_image_identity_transfer():
    m = small_assembly()
    x = images()
    out = m.forward_training(x, x.clone())
    torch.testing.assert_close(out.p_stylized, out.p_src, atol=1e-5, rtol=0)
    torch.testing.assert_close(out.proj_stylized.values, out.proj_src.values, atol=1e-5, rtol=0)


def test_stylization_changes_output():
    m = small_assembly()
    out = m.forward_training(images(), images(seed=5) * 0.3 + 0.6)
    assert not torch.allclose(out.logits_src, out.logits_stylized)
    assert set(out.wild_stats) == {"stem", "enc1"}


def test_eval_mode_bypasses_stylization():
    m = small_assembly().eval()
    out = m.forward_training(images(), images(seed=1))
    assert torch.equal(out.logits_src, out.logits_stylized)


def test_linear_backbone_hand_trace():
    w1 = torch.tensor([[[[2.0]]], [[[-1.0]]]])  # 1 -> 2 channels
    w2 = torch.tensor([[[[1.0]], [[0.5]]]])  # 2 -> 1 channel
    l1, l2 = nn.Conv2d(1, 2, 1, bias=False), nn.Conv2d(2, 1, 1, bias=False)
    l1.weight.data, l2.weight.data = w1, w2
    backbone = StagedBackbone({"l1": l1, "l2": l2}, out_channels=1, stride=1)
    m = NetworkAssembly(backbone, num_classes=2, proj_dim=2, fs_hooks=("l1",), fs_depth=1)
    m.classifier.weight.data = torch.tensor([[[[1.0]]], [[[-1.0]]]])
    m.classifier.bias.data.zero_()
    xs = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    xw = torch.tensor([[[[0.0, 1.0], [1.0, 5.0]]]])
    with torch.no_grad():
        out = m.forward_training(xs, xw)

    src, wild = xs[0].numpy().astype(np.float64), xw[0].numpy().astype(np.float64)
    z_s = np.stack([2 * src[0], -src[0]])
    z_w = np.stack([2 * wild[0], -wild[0]])
    ms, ss = channel_stats_loop(z_s)
    mw, sw = channel_stats_loop(z_w)
    z_sw = sw[:, None, None] * (z_s - ms[:, None, None]) / ss[:, None, None] + mw[:, None, None]
    feat = z_sw[0] + 0.5 * z_sw[1]
    logits = np.stack([feat, -feat])
    np.testing.assert_allclose(out.logits_stylized[0].numpy(), logits, rtol=1e-5, atol=1e-5)
    feat_plain = z_s[0] + 0.5 * z_s[1]
    np.testing.assert_allclose(out.logits_src[0].numpy(), np.stack([feat_plain, -feat_plain]), rtol=1e-6)


def test_hook_validation():
    with pytest.raises(ConfigError):
        small_assembly(fs_hooks=("nope",))
    with pytest.raises(ConfigError):
        small_assembly(fs_hooks=("context",))  # beyond the shallow depth bound
    with pytest.raises(ConfigError):
        small_assembly(fs_mode="whiten")


def test_spatial_mismatch():
    with pytest.raises(ShapeError):
        small_assembly().forward_training(images(size=24), images(size=32))


def test_plain_branch_independent_of_hooks():
    outs = []
    for hooks in [(), ("stem",), ("stem", "enc1", "enc2")]:
        m = small_assembly(fs_hooks=hooks, seed=3)
        outs.append(m.forward_training(images(), images(seed=9)))
    for o in outs[1:]:
        assert torch.equal(o.logits_src, outs[0].logits_src)
        assert torch.equal(o.proj_src.values, outs[0].proj_src.values)


def test_determinism():
    a = small_assembly(seed=7).forward_training(images(), images(seed=2))
    b = small_assembly(seed=7).forward_training(images(), images(seed=2))
    assert torch.equal(a.logits_stylized, b.logits_stylized)
    assert torch.equal(a.proj_wild.values, b.proj_wild.values)


def test_random_mode_seeded():
    m = small_assembly(fs_mode="random")
    x, w = images(), images(seed=1)
    a = m.forward_training(x, w, generator=torch.Generator().manual_seed(1))
    b = m.forward_training(x, w, generator=torch.Generator().manual_seed(1))
    c = m.forward_training(x, w, generator=torch.Generator().manual_seed(2))
    assert torch.equal(a.logits_stylized, b.logits_stylized)
    assert not torch.equal(a.logits_stylized, c.logits_stylized)


def test_wild_pass_shares_backbone():
    m = small_assembly()
    x, w = images(), images(seed=1)
    before = m.forward_training(x, w).proj_wild.values
    with torch.no_grad():
        m.backbone.stages["stem"][0].weight.mul_(2)
    assert not torch.equal(before, m.forward_training(x, w).proj_wild.values)
    assert len({id(p) for p in m.parameters()}) == len(list(m.parameters()))


def test_strip_matches_plain_branch_and_drops_projector(tmp_path):
    m = small_assembly()
    stripped = strip_for_inference(m)
    for seed in range(10):
        x = images(n=1, seed=seed)
        p_train = m.forward_training(x, images(n=1, seed=100 + seed)).p_src
        torch.testing.assert_close(stripped(x), p_train, atol=1e-6, rtol=0)
    assert count_parameters(stripped) == count_parameters(m) - count_parameters(m.projector)
    path = save_inference_checkpoint(tmp_path / "inf.npz", stripped, {"num_classes": 3})
    arrays, meta = load_checkpoint(path)
    assert meta["kind"] == "inference"
    assert not any("projector" in k for k in arrays)
    assert sum(a.size for a in arrays.values()) == count_parameters(stripped)


def test_checkpoint_roundtrip(tmp_path):
    m = small_assembly()
    arrays = {k: v.numpy() for k, v in m.state_dict().items()}
    save_checkpoint(tmp_path / "c.npz", {f"model.{k}": v for k, v in arrays.items()}, {"iteration": 5, "hooks": ["stem"]})
    loaded, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta == {"iteration": 5, "hooks": ["stem"]}
    other = small_assembly(seed=99)
    load_module_arrays(other, loaded, "model.")
    x, w = images(), images(seed=1)
    assert torch.equal(other.forward_training(x, w).logits_src, m.forward_training(x, w).logits_src)


def test_batchnorm_variant():
    torch.manual_seed(0)
    plain, normed = conv_backbone((8, 8, 12, 12, 12)), conv_backbone((8, 8, 12, 12, 12), norm=True)
    assert not any(isinstance(m, nn.BatchNorm2d) for m in plain.modules())
    assert sum(isinstance(m, nn.BatchNorm2d) for m in normed.modules()) == 5 + 2 * 4
    m = NetworkAssembly(normed, num_classes=3, proj_dim=6)
    out = m.forward_training(images(), images(seed=1))
    assert out.logits_stylized.shape == (2, 3, 24, 24)
    m.eval()
    torch.testing.assert_close(strip_for_inference(m)(images()), m.forward_training(images(), images(seed=1)).p_src)
