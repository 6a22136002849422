import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from dgseg.datapipe import (
    ArrayDataset,
    EpochSampler,
    LabeledSample,
    PairedBatcher,
    ToyConfig,
    WildSample,
    augment,
    collate,
    label_histogram,
    load_dataset,
    prepare_wild,
    read_mapping,
    remap_labels,
    synth_toy,
    write_dataset,
)
from dgseg.errors import DataIntegrityError

SMALL = ToyConfig(num_classes=4, image_size=48, n_source=12, n_val=6, n_unseen=6, unseen_domains=2, n_wild=10, radius=(6, 10))


def coded_sample(h=40, w=52):
    label = (np.arange(h * w).reshape(h, w) % 200).astype(np.int64)
    image = np.stack([label / 255.0, np.zeros((h, w)), np.ones((h, w))]).astype(np.float32)
    return LabeledSample(image, label)


def test_mapping_file(tmp_path):
    p = tmp_path / "map.csv"
    p.write_text("raw_id,train_id\n7,0\n26,1\n# comment\n33,2\n")
    assert read_mapping(p) == {7: 0, 26: 1, 33: 2}
    p.write_text("7,0\nx,y\n")
    with pytest.raises(DataIntegrityError):
        read_mapping(p)


def test_remap_unknown_to_ignore():
    raw = np.array([[7, 26, 3], [33, 7, 0]])
    out = remap_labels(raw, {7: 0, 26: 1, 33: 2})
    np.testing.assert_array_equal(out, [[0, 1, 255], [2, 0, 255]])


@given(st.lists(st.integers(0, 40), min_size=1, max_size=50), st.dictionaries(st.integers(0, 40), st.integers(0, 18)))
def test_remap_matches_dict_lookup(raw, mapping):
    out = remap_labels(np.array(raw), mapping)
    assert out.tolist() == [mapping.get(r, 255) for r in raw]


def test_augment_identity_at_unit_scale_and_full_crop():
    s = coded_sample(32, 32)
    out = augment(s, np.random.default_rng(0), 32, (1.0, 1.0))
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.label, s.label)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(8, 40))
def test_crop_keeps_image_and_label_aligned(seed, crop):
    s = coded_sample()
    out = augment(s, np.random.default_rng(seed), crop, (1.0, 1.0))
    assert out.image.shape == (3, crop, crop) and out.label.shape == (crop, crop)
    np.testing.assert_allclose(out.image[0] * 255.0, out.label, atol=1e-3)


def test_rescaled_crop_alignment_marker():
    # blocky image: label and image agree away from block borders after resizing
    blocks = np.kron(np.arange(36).reshape(6, 6), np.ones((8, 8))).astype(np.int64)
    s = LabeledSample(np.stack([blocks / 100.0] * 3).astype(np.float32), blocks)
    for seed in range(5):
        out = augment(s, np.random.default_rng(seed), 40, (1.5, 2.0))
        agree = np.isclose(out.image[0] * 100.0, out.label, atol=1e-3)
        assert agree.mean() > 0.7


def test_small_images_are_padded_with_ignore():
    s = coded_sample(10, 12)
    out = augment(s, np.random.default_rng(0), 16, (1.0, 1.0))
    assert out.image.shape == (3, 16, 16)
    assert (out.label == 255).sum() == 16 * 16 - 10 * 12


def test_seeded_augmentation_reproducible():
    s = coded_sample()
    a = augment(s, np.random.default_rng(3), 24)
    b = augment(s, np.random.default_rng(3), 24)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.label, b.label)


def test_prepare_wild_shape():
    w = WildSample(np.random.default_rng(0).random((3, 30, 70), dtype=np.float32))
    assert prepare_wild(w, np.random.default_rng(0), 24).image.shape == (3, 24, 24)
    assert prepare_wild(w, np.random.default_rng(0), 64).image.shape == (3, 64, 64)


def test_epoch_sampler_covers_each_index_once_per_epoch():
    sampler, rng = EpochSampler(7), np.random.default_rng(0)
    for _ in range(3):
        assert sorted(sampler.next(rng) for _ in range(7)) == list(range(7))
    with pytest.raises(DataIntegrityError):
        EpochSampler(0)


def test_batcher_pairs_and_resume():
    data = synth_toy(0, SMALL)
    b = PairedBatcher(data.source, data.wild, np.random.default_rng(1), 3, 32, (0.8, 1.2))
    b.next_batch()
    state = b.state()
    x1 = collate(b.next_batch())
    b2 = PairedBatcher(data.source, data.wild, np.random.default_rng(99), 3, 32, (0.8, 1.2))
    b2.load_state(state)
    x2 = collate(b2.next_batch())
    for a, c in zip(x1, x2):
        assert np.array_equal(a.numpy(), c.numpy())
    x_src, y_src, x_wild = x1
    assert x_src.shape == (3, 3, 32, 32) and y_src.shape == (3, 32, 32) and x_wild.shape == (3, 3, 32, 32)


def test_wild_with_ten_images_and_no_labels():
    data = synth_toy(0, SMALL)
    assert len(data.wild) == 10 and not data.wild.labeled
    b = PairedBatcher(data.source, data.wild, np.random.default_rng(0), 4, 24)
    for _ in range(5):
        assert len(b.next_batch()) == 4


def test_synth_deterministic_and_seed_sensitive():
    a, b, c = synth_toy(5, SMALL), synth_toy(5, SMALL), synth_toy(6, SMALL)
    np.testing.assert_array_equal(a.source[0].image, b.source[0].image)
    np.testing.assert_array_equal(a.unseen["unseen_b"][3].label, b.unseen["unseen_b"][3].label)
    assert not np.array_equal(a.source[0].image, c.source[0].image)
    assert set(a.eval_domains()) == {"source", "unseen_b", "unseen_c"}


def test_domains_share_label_marginals():
    cfg = ToyConfig(num_classes=4, image_size=64, n_source=120, n_val=120, n_unseen=120, unseen_domains=2, n_wild=4, radius=(8, 13))
    data = synth_toy(0, cfg)
    ref = label_histogram(data.source, 4)
    for ds in [data.seen_val, *data.unseen.values()]:
        assert np.abs(label_histogram(ds, 4) - ref).max() < 0.02


def test_domains_differ_in_appearance():
    data = synth_toy(0, SMALL)
    means = {k: np.mean([ds[i].image.mean(axis=(1, 2)) for i in range(len(ds))], axis=0) for k, ds in data.eval_domains().items()}
    assert np.abs(means["source"] - means["unseen_b"]).max() > 0.1
    assert np.abs(means["source"] - means["unseen_c"]).max() > 0.1


def test_folder_roundtrip(tmp_path):
    data = synth_toy(0, SMALL)
    write_dataset(data.source, tmp_path / "src")
    write_dataset(data.wild, tmp_path / "wild")
    (tmp_path / "map.csv").write_text("".join(f"{i},{i}\n" for i in range(4)))
    ds = load_dataset(tmp_path / "src", tmp_path / "map.csv")
    assert len(ds) == len(data.source)
    np.testing.assert_array_equal(ds[2].label, data.source[2].label)
    np.testing.assert_allclose(ds[2].image, data.source[2].image, atol=1 / 255)
    wild = load_dataset(tmp_path / "wild", role="wild")
    assert not wild.labeled and isinstance(wild[0], WildSample)


def test_missing_label_is_named(tmp_path):
    root = tmp_path / "d"
    (root / "images").mkdir(parents=True)
    (root / "labels").mkdir()
    for stem in ("a", "b"):
        Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(root / "images" / f"{stem}.png")
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(root / "labels" / "a.png")
    with pytest.raises(DataIntegrityError, match="'b'"):
        load_dataset(root)


def test_empty_or_missing_folder(tmp_path):
    with pytest.raises(DataIntegrityError):
        load_dataset(tmp_path / "nothing")
    (tmp_path / "e" / "images").mkdir(parents=True)
    (tmp_path / "e" / "labels").mkdir()
    with pytest.raises(DataIntegrityError):
        load_dataset(tmp_path / "e")


def test_array_dataset_length_mismatch():
    with pytest.raises(DataIntegrityError):
        ArrayDataset([np.zeros((3, 4, 4))], [])
