import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abg.config import desk_preset, source_only
from abg.data import (ShiftSpec, VideoSet, batches, batches_per_epoch, generate, labeled_subset, mask_labels,
                      read_dataset, source_batches, write_dataset)
from abg.errors import BadMagic, BatchLargerThanSet, DimMismatch, InvalidSpec, TruncatedFile, VersionMismatch
from abg.experiments import Scenario, make_data, target_accuracy


def _small(seed=0, **kw):
    return generate(ShiftSpec(**kw), 12, 10, 4, 3, 5, seed)


def test_file_round_trip_is_exact(tmp_path):
    src, tgt = _small()
    for vs in (src, tgt):
        write_dataset(tmp_path / "x.abgd", vs)
        assert read_dataset(tmp_path / "x.abgd").equals(vs)


def test_empty_set_round_trip(tmp_path):
    empty = VideoSet(np.zeros((0, 3, 2)), np.zeros(0), "target", 4)
    write_dataset(tmp_path / "e.abgd", empty)
    back = read_dataset(tmp_path / "e.abgd")
    assert len(back) == 0 and back.K == 3 and back.D == 2 and back.domain == "target"


def _written(tmp_path):
    path = tmp_path / "d.abgd"
    write_dataset(path, _small()[0])
    return path, bytearray(path.read_bytes())


def test_corrupt_magic(tmp_path):
    path, blob = _written(tmp_path)
    blob[1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(BadMagic):
        read_dataset(path)


def test_wrong_version(tmp_path):
    path, blob = _written(tmp_path)
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatch):
        read_dataset(path)


def test_truncated_and_oversized_payload(tmp_path):
    path, blob = _written(tmp_path)
    path.write_bytes(bytes(blob[:-3]))
    with pytest.raises(TruncatedFile):
        read_dataset(path)
    path.write_bytes(bytes(blob[:10]))
    with pytest.raises(TruncatedFile):
        read_dataset(path)
    path.write_bytes(bytes(blob) + b"\0" * 4)
    with pytest.raises(DimMismatch):
        read_dataset(path)


def test_generator_is_deterministic_without_noise():
    a = generate(ShiftSpec(noise_source=0, noise_target=0), 4, 4, 4, 3, 5, seed=3)
    b = generate(ShiftSpec(noise_source=0, noise_target=0), 4, 4, 4, 3, 5, seed=3)
    assert a[0].equals(b[0]) and a[1].equals(b[1])


@given(st.integers(0, 1000))
def test_generator_is_a_pure_function_of_spec_and_seed(seed):
    a, b = _small(seed), _small(seed)
    assert a[0].equals(b[0]) and a[1].equals(b[1])


def test_no_shift_keeps_distributions_equal():
    src, tgt = generate(ShiftSpec(rotation=0.0, bias=0.0), 2000, 2000, 4, 3, 5, seed=1)
    gap = np.abs(src.frames.mean(axis=0) - tgt.frames.mean(axis=0))
    # per-coordinate std of the class mixture is at most sqrt(noise^2 + spread), bound generously
    sd = np.sqrt(src.frames.var(axis=0) + tgt.frames.var(axis=0))
    assert (gap < 3 * sd / math.sqrt(2000) * 1.5).all()


def test_shift_moves_the_target():
    src, tgt = generate(ShiftSpec(rotation=math.pi / 3, bias=4.0), 400, 400, 4, 3, 8, seed=1)
    assert np.linalg.norm(src.frames.mean(axis=(0, 1)) - tgt.frames.mean(axis=(0, 1))) > 2.0


def test_order_flag_pairs_share_frames_in_reverse():
    src, _ = generate(ShiftSpec(order=True, noise_source=0, noise_target=0), 4, 4, 4, 5, 3, seed=0)
    by = {int(c): src.frames[src.labels == c][0] for c in range(4)}
    assert np.array_equal(by[1], by[0][::-1]) and np.array_equal(by[3], by[2][::-1])
    np.testing.assert_allclose(by[1].mean(axis=0), by[0].mean(axis=0), atol=1e-6)


def test_generator_rejects_bad_specs():
    with pytest.raises(InvalidSpec):
        generate(ShiftSpec(bias=-1), 4, 4, 4, 3, 5)
    with pytest.raises(InvalidSpec):
        generate(ShiftSpec(), 4, 4, 1, 3, 5)
    with pytest.raises(InvalidSpec):
        generate(ShiftSpec(order=True), 4, 4, 3, 3, 5)


def test_balanced_labels():
    src, tgt = _small()
    assert np.bincount(src.labels, minlength=4).tolist() == [3, 3, 3, 3]


def _sets(N_s, N_t):
    src, tgt = generate(ShiftSpec(), N_s, N_t, 2, 2, 2, seed=0)
    return src, tgt


def test_batch_count_example():
    assert batches_per_epoch(10, 6, 4, 3) == 2
    src, tgt = _sets(10, 6)
    assert len(list(batches(src, tgt, 4, 3, seed=0, epoch=0))) == 2


def test_full_size_batch_is_a_permutation():
    src, tgt = _sets(8, 6)
    (bs, bt), = batches(src, tgt, 8, 6, seed=0, epoch=0)
    assert sorted(bs.idx.tolist()) == list(range(8)) and sorted(bt.idx.tolist()) == list(range(6))


def test_shorter_side_cycles():
    src, tgt = _sets(20, 6)
    pairs = list(batches(src, tgt, 4, 3, seed=0, epoch=0))
    assert len(pairs) == 5
    assert all(len(b) == 3 for _, b in pairs)


def test_batches_are_deterministic_and_epoch_dependent():
    src, tgt = _sets(12, 12)
    a = [b.idx.tolist() for b, _ in batches(src, tgt, 4, 4, 1, 0)]
    b = [b.idx.tolist() for b, _ in batches(src, tgt, 4, 4, 1, 0)]
    c = [b.idx.tolist() for b, _ in batches(src, tgt, 4, 4, 1, 1)]
    assert a == b and a != c


def test_batches_cover_every_index_over_many_epochs():
    src, tgt = _sets(10, 7)
    seen_s, seen_t = np.zeros(10, int), np.zeros(7, int)
    for epoch in range(100):
        for bs, bt in batches(src, tgt, 3, 2, 5, epoch):
            assert bs.idx.max() < 10 and bt.idx.max() < 7
            np.add.at(seen_s, bs.idx, 1)
            np.add.at(seen_t, bt.idx, 1)
    assert seen_s.min() > 0 and seen_t.min() > 0
    # roughly uniform: each index drawn near its expected count
    assert seen_s.max() / seen_s.min() < 1.6


def test_batch_larger_than_set():
    src, tgt = _sets(4, 4)
    with pytest.raises(BatchLargerThanSet):
        list(batches(src, tgt, 5, 2, 0, 0))
    with pytest.raises(BatchLargerThanSet):
        list(source_batches(src, 5, 0, 0))


def test_mask_ratio_extremes_and_rounding():
    _, tgt = generate(ShiftSpec(), 4, 128, 4, 2, 2, seed=0)
    assert labeled_subset(128, 0.5, 0).size == 64
    (bs, bt), *_ = batches(tgt, tgt, 16, 16, 0, 0)
    assert len(mask_labels(tgt, 0.0, 0)[1](bt)) == 0
    full = mask_labels(tgt, 1.0, 0)[1](bt)
    assert full.labeled.tolist() == list(range(16))
    assert np.array_equal(full.labels, bt.labels)


def test_mask_is_a_fixed_video_subset():
    _, tgt = generate(ShiftSpec(), 4, 40, 4, 2, 2, seed=0)
    chosen, for_batch = mask_labels(tgt, 0.3, 2)
    for epoch in range(3):
        for _, bt in batches(tgt, tgt, 8, 8, 0, epoch):
            m = for_batch(bt)
            assert set(bt.idx[m.labeled].tolist()) == set(bt.idx.tolist()) & set(chosen.tolist())
    with pytest.raises(InvalidSpec):
        labeled_subset(10, 1.5, 0)


def test_shift_costs_a_source_trained_classifier_ten_points():
    cfg = source_only(desk_preset(epochs=15, seed=0))
    src, train, test = make_data(cfg, Scenario(ShiftSpec()), seed=0)
    transfer = target_accuracy(cfg, (src, train, test))
    as_source = VideoSet(train.frames, train.labels, "source", train.n_classes)
    in_domain = target_accuracy(cfg, (as_source, train, test))
    assert in_domain - transfer > 0.10
