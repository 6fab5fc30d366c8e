import numpy as np
import pytest
from PIL import Image

from uchfr.data import (AugmentConfig, Sample, SamplerConfig, SynthConfig,
                        augment, center_crop_square, epoch_batches,
                        generate_synth, hflip, load_dataset, load_image_dir,
                        raw_nn_rank1, save_dataset, split_by_class)
from uchfr.losses import LabeledBatch


def test_synth_config_validation():
    with pytest.raises(ValueError, match="num_classes"):
        SynthConfig(num_classes=1)
    with pytest.raises(ValueError, match="samples_per_class"):
        SynthConfig(samples_per_class_per_modality=1)
    with pytest.raises(ValueError, match=">= 0"):
        SynthConfig(gap_severity=-1.0)


def test_synth_seeded_determinism():
    cfg = SynthConfig(num_classes=4, samples_per_class_per_modality=3, raw_dim=8, seed=11)
    a, b = generate_synth(cfg), generate_synth(cfg)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.class_ids, b.class_ids)
    assert np.array_equal(a.modalities, b.modalities)
    c = generate_synth(SynthConfig(num_classes=4, samples_per_class_per_modality=3,
                                   raw_dim=8, seed=12))
    assert not np.array_equal(a.features, c.features)


def test_synth_noise_free_collapses_groups():
    cfg = SynthConfig(num_classes=3, samples_per_class_per_modality=4, raw_dim=6,
                      noise_scale=0.0, seed=1)
    ds = generate_synth(cfg)
    for cid in ds.classes():
        for m in ("A", "B"):
            rows = ds.features[(ds.class_ids == cid) & (ds.modalities == m)]
            assert np.all(rows == rows[0])


def test_synth_balanced_composition():
    cfg = SynthConfig(num_classes=5, samples_per_class_per_modality=3, raw_dim=8, seed=2)
    ds = generate_synth(cfg)
    assert len(ds) == 5 * 3 * 2
    s = ds.summary()
    assert s["per_modality"] == {"A": 15, "B": 15}
    assert np.all(np.isfinite(ds.features))


def test_gap_severity_degrades_raw_matching():
    def heldout_rank1(gamma, seed):
        cfg = SynthConfig(num_classes=20, samples_per_class_per_modality=6, raw_dim=32,
                          gap_severity=gamma, noise_scale=0.1, seed=seed)
        _, held = split_by_class(generate_synth(cfg), 15)
        return raw_nn_rank1(held)

    for seed in (0, 1, 2):
        assert heldout_rank1(5.0, seed) < heldout_rank1(0.0, seed)


def test_split_by_class_disjoint():
    ds = generate_synth(SynthConfig(num_classes=6, samples_per_class_per_modality=2,
                                    raw_dim=4, seed=3))
    train, held = split_by_class(ds, 4)
    assert set(train.classes()) == {0, 1, 2, 3}
    assert set(held.classes()) == {4, 5}
    with pytest.raises(ValueError):
        split_by_class(ds, 6)


def test_dataset_roundtrip(tmp_path):
    ds = generate_synth(SynthConfig(num_classes=3, samples_per_class_per_modality=2,
                                    raw_dim=5, seed=4))
    p = tmp_path / "ds.uchfr"
    save_dataset(ds, p)
    assert (tmp_path / "ds.uchfr.json").exists()
    back = load_dataset(p)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.class_ids, ds.class_ids)
    assert np.array_equal(back.modalities, ds.modalities)

    # same config + seed saved twice -> byte-identical files
    p2 = tmp_path / "ds2.uchfr"
    save_dataset(generate_synth(SynthConfig(num_classes=3, samples_per_class_per_modality=2,
                                            raw_dim=5, seed=4)), p2)
    assert p.read_bytes() == p2.read_bytes()
    assert (tmp_path / "ds.uchfr.json").read_bytes() == (tmp_path / "ds2.uchfr.json").read_bytes()


def _write_image_tree(root, classes=3, per=3, size=(12, 10), modalities=("A", "B")):
    rng = np.random.default_rng(0)
    for c in range(classes):
        for m in modalities:
            d = root / f"subj{c}" / m
            d.mkdir(parents=True)
            for i in range(per):
                arr = (rng.uniform(0, 255, size=size)).astype(np.uint8)
                Image.fromarray(arr, mode="L").save(d / f"img{i}.png")


def test_center_crop_shorter_edge_rule():
    img = np.arange(10 * 8, dtype=np.float64).reshape(10, 8)
    out = center_crop_square(img)
    assert out.shape == (8, 8)
    assert np.array_equal(out, img[1:9, :])


def test_load_image_dir_normalization_contract(tmp_path):
    _write_image_tree(tmp_path, classes=3, per=4)
    ds, stats = load_image_dir(tmp_path, side=4)
    assert ds.kind == "image"
    assert ds.features.shape == (3 * 4 * 2, 4, 4)
    flat = ds.features.reshape(len(ds), -1).astype(np.float64)
    assert np.all(np.abs(flat.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(flat.std(axis=0) - 1.0) < 1e-6)


def test_load_image_dir_eval_uses_training_stats(tmp_path):
    train_root = tmp_path / "train"
    eval_root = tmp_path / "eval"
    train_root.mkdir()
    eval_root.mkdir()
    _write_image_tree(train_root, classes=3, per=3)
    _write_image_tree(eval_root, classes=2, per=3)
    _, stats = load_image_dir(train_root, side=4)
    eval_ds, stats2 = load_image_dir(eval_root, side=4, stats=stats)
    assert stats2 is stats
    flat = eval_ds.features.reshape(len(eval_ds), -1).astype(np.float64)
    # normalized with foreign statistics: not self-normalized
    assert np.abs(flat.mean(axis=0)).max() > 1e-3


def test_load_image_dir_rejects_single_modality_class(tmp_path):
    _write_image_tree(tmp_path, classes=2, per=2)
    lonely = tmp_path / "subj9" / "A"
    lonely.mkdir(parents=True)
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8), mode="L").save(lonely / "x.png")
    with pytest.raises(ValueError, match="only one modality"):
        load_image_dir(tmp_path, side=4)


def test_load_image_dir_skips_unreadable(tmp_path):
    _write_image_tree(tmp_path, classes=2, per=2)
    junk = tmp_path / "subj0" / "A" / "broken.png"
    junk.write_bytes(b"this is not a png")
    with pytest.warns(UserWarning, match="unreadable"):
        ds, _ = load_image_dir(tmp_path, side=4)
    assert len(ds) == 2 * 2 * 2


def test_augment_identity_when_ranges_zero():
    rng = np.random.default_rng(5)
    img = rng.uniform(0, 1, size=(8, 8))
    s = Sample(img.copy(), 3, "A")
    out = augment(s, AugmentConfig(), rng)
    assert np.array_equal(out.features, img)
    assert out.class_id == 3 and out.modality == "A"


def test_hflip_involution():
    img = np.random.default_rng(6).uniform(size=(5, 7))
    assert np.array_equal(hflip(hflip(img)), img)


def test_augment_seeded_reproducible():
    cfg = AugmentConfig(rotation_deg=10, shift_frac=0.1, shear_deg=5, brightness=0.2, hflip=True)
    img = np.random.default_rng(7).uniform(size=(9, 9))
    s = Sample(img, 0, "B")
    a = augment(s, cfg, np.random.default_rng(42)).features
    b = augment(s, cfg, np.random.default_rng(42)).features
    assert np.array_equal(a, b)
    c = augment(s, cfg, np.random.default_rng(43)).features
    assert not np.array_equal(a, c)


def test_augment_vector_jitter_only():
    rng = np.random.default_rng(8)
    v = rng.standard_normal(6)
    out = augment(Sample(v.copy(), 1, "A"), AugmentConfig(jitter=0.0), rng)
    assert np.array_equal(out.features, v)
    out = augment(Sample(v.copy(), 1, "A"), AugmentConfig(jitter=0.5), rng)
    assert not np.array_equal(out.features, v)


def test_sampler_config_validation():
    with pytest.raises(ValueError, match="2 \\* P \\* K"):
        SamplerConfig(batch_size=60, classes_per_batch=8, samples_per_class=4)
    with pytest.raises(ValueError, match="samples_per_class"):
        SamplerConfig(batch_size=16, classes_per_batch=8, samples_per_class=1)


def test_sampler_batch_composition_reference_case():
    ds = generate_synth(SynthConfig(num_classes=20, samples_per_class_per_modality=4,
                                    raw_dim=8, seed=9))
    cfg = SamplerConfig(batch_size=64, classes_per_batch=16, samples_per_class=2, seed=0)
    batches = epoch_batches(ds, cfg, epoch=0)
    assert len(batches) == 1  # 20 classes // 16 per batch
    b = batches[0]
    assert len(b.class_ids) == 64
    assert (b.modalities == "A").sum() == 32 and (b.modalities == "B").sum() == 32
    uid, counts = np.unique(b.class_ids, return_counts=True)
    assert len(uid) == 16 and np.all(counts == 4)


def test_sampler_batches_satisfy_loss_contract():
    ds = generate_synth(SynthConfig(num_classes=9, samples_per_class_per_modality=3,
                                    raw_dim=6, seed=10))
    cfg = SamplerConfig(batch_size=12, classes_per_batch=3, samples_per_class=2, seed=1)
    for epoch in range(3):
        for b in epoch_batches(ds, cfg, epoch):
            norm = b.features / np.linalg.norm(b.features, axis=1, keepdims=True)
            LabeledBatch(norm, b.class_ids, b.modalities).validate_sampler_contract()


def test_sampler_no_repeats_within_epoch_and_determinism():
    ds = generate_synth(SynthConfig(num_classes=8, samples_per_class_per_modality=4,
                                    raw_dim=6, seed=11))
    cfg = SamplerConfig(batch_size=16, classes_per_batch=2, samples_per_class=4, seed=5)
    batches = epoch_batches(ds, cfg, epoch=0)
    seen = np.concatenate([b.indices for b in batches])
    assert len(seen) == len(set(seen.tolist()))
    again = epoch_batches(ds, cfg, epoch=0)
    for b1, b2 in zip(batches, again):
        assert np.array_equal(b1.indices, b2.indices)
    other_epoch = epoch_batches(ds, cfg, epoch=1)
    assert not all(np.array_equal(b1.indices, b2.indices)
                   for b1, b2 in zip(batches, other_epoch))


def test_sampler_infeasible_rejected():
    ds = generate_synth(SynthConfig(num_classes=3, samples_per_class_per_modality=2,
                                    raw_dim=4, seed=12))
    cfg = SamplerConfig(batch_size=40, classes_per_batch=5, samples_per_class=4, seed=0)
    with pytest.raises(ValueError, match="sampler needs"):
        epoch_batches(ds, cfg, 0)
