from __future__ import annotations

import struct

import numpy as np
import pytest

from nfrepop.data import (
    Dataset,
    SynthConfig,
    generate_synthetic,
    load_delimited,
    load_idx,
    save_delimited,
    standardize,
    teacher_1d,
)
from nfrepop.errors import BadMagic, ConfigError, CountMismatch, TruncatedPayload


def idx_images(pixels, magic=0x00000803):
    count, rows, cols = pixels.shape
    return struct.pack(">IIII", magic, count, rows, cols) + pixels.astype(np.uint8).tobytes()


def idx_labels(labels, magic=0x00000801):
    return struct.pack(">II", magic, len(labels)) + bytes(labels)


@pytest.fixture
def idx_pair(tmp_path):
    pixels = np.array([[[0, 255], [51, 102]], [[255, 0], [0, 204]]])
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    img.write_bytes(idx_images(pixels))
    lab.write_bytes(idx_labels([3, 4]))
    return img, lab


class TestSynthetic:
    def test_shapes(self):
        train, test = generate_synthetic()
        assert train.X.shape == (500, 100)
        assert test.X.shape == (500, 100)

    def test_repeated_columns_bitwise(self):
        cfg = SynthConfig()
        train, _ = generate_synthetic(cfg)
        src = train.provenance["repeated_sources"]
        start = cfg.d_informative + cfg.d_redundant
        for k, s in enumerate(src):
            np.testing.assert_array_equal(train.X[:, start + k], train.X[:, s])

    def test_reproducible(self):
        a, _ = generate_synthetic(SynthConfig(seed=3))
        b, _ = generate_synthetic(SynthConfig(seed=3))
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)

    def test_splits_differ(self):
        train, test = generate_synthetic()
        assert not np.array_equal(train.X, test.X)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_class_balance(self, seed):
        for ds in generate_synthetic(SynthConfig(seed=seed)):
            assert 0.45 <= np.mean(ds.y > 0) <= 0.55

    def test_probes(self):
        # least-squares linear probes: informative columns separate, noise columns do not
        train, test = generate_synthetic()

        def probe(cols):
            A = np.column_stack([train.X[:, cols], np.ones(train.n)])
            w = np.linalg.lstsq(A, train.y, rcond=None)[0]
            B = np.column_stack([test.X[:, cols], np.ones(test.n)])
            return np.mean(np.sign(B @ w) != test.y)

        assert probe([0, 1, 2, 3]) < 0.10
        assert abs(probe([96, 97, 98, 99]) - 0.5) < 0.08

    @pytest.mark.parametrize("kw", [{"d_noise": 75}, {"d_informative": 0, "d_noise": 80}, {"n_train": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SynthConfig(**kw)


class TestTeacher:
    def test_flip_fraction(self):
        ds = teacher_1d(20000, seed=1, flip=0.1)
        agree = np.mean(np.sign(ds.X[:, 0]) == ds.y)
        assert agree == pytest.approx(0.9, abs=0.01)

    def test_dims(self):
        assert teacher_1d().X.shape == (200, 1)


class TestIdx:
    def test_fixture_exact(self, idx_pair):
        ds = load_idx(*idx_pair, binarize="parity")
        expected = np.array([[0, 1, 0.2, 0.4], [1, 0, 0, 0.8]])
        np.testing.assert_array_equal(ds.X, expected)
        np.testing.assert_array_equal(ds.y, [-1.0, 1.0])

    def test_endpoint(self, idx_pair):
        assert load_idx(*idx_pair, binarize="parity").X.max() == 1.0

    def test_one_vs_rest(self, idx_pair):
        ds = load_idx(*idx_pair, binarize="one-vs-rest:3")
        np.testing.assert_array_equal(ds.y, [1.0, -1.0])

    def test_count_mismatch(self, tmp_path, idx_pair):
        lab = tmp_path / "lab3.idx"
        lab.write_bytes(idx_labels([1, 2, 3]))
        with pytest.raises(CountMismatch):
            load_idx(idx_pair[0], lab, "parity")

    def test_bad_magic(self, tmp_path, idx_pair):
        bad = tmp_path / "bad.idx"
        bad.write_bytes(idx_images(np.zeros((2, 2, 2)), magic=0x00000802))
        with pytest.raises(BadMagic):
            load_idx(bad, idx_pair[1], "parity")

    def test_truncated(self, tmp_path, idx_pair):
        raw = idx_pair[0].read_bytes()
        cut = tmp_path / "cut.idx"
        cut.write_bytes(raw[:-1])
        with pytest.raises(TruncatedPayload):
            load_idx(cut, idx_pair[1], "parity")

    def test_truncated_header(self, tmp_path, idx_pair):
        cut = tmp_path / "cut.idx"
        cut.write_bytes(b"\x00\x00\x08")
        with pytest.raises(TruncatedPayload):
            load_idx(cut, idx_pair[1], "parity")

    def test_binarize_required(self, idx_pair):
        with pytest.raises(ConfigError):
            load_idx(*idx_pair, binarize=None)


class TestStandardize:
    def test_moments(self):
        rng = np.random.default_rng(0)
        ds = Dataset(3 + 2 * rng.standard_normal((100, 4)), np.ones(100))
        out, _ = standardize(ds)
        np.testing.assert_allclose(out.X.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(out.X.std(axis=0), 1, atol=1e-12)

    def test_constant_column_flagged(self):
        X = np.column_stack([np.arange(5.0), np.full(5, 7.0)])
        out, stats = standardize(Dataset(X, np.ones(5)))
        np.testing.assert_array_equal(stats["constant"], [False, True])
        np.testing.assert_array_equal(out.X[:, 1], 7.0)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        once, _ = standardize(Dataset(rng.standard_normal((50, 3)) * 5, np.ones(50)))
        twice, _ = standardize(once)
        np.testing.assert_allclose(twice.X, once.X, atol=1e-12)

    def test_train_stats_on_test(self):
        train, test = generate_synthetic()
        _, stats = standardize(train)
        out, _ = standardize(test, stats)
        # held-out means carry the train-mean error too (variance 2/n), so the
        # 3/sqrt(n) band is a per-column coverage statement, not a max over 100 columns
        inside = np.abs(out.X.mean(axis=0)) <= 3 / np.sqrt(test.n)
        assert inside.mean() >= 0.95

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            standardize(Dataset(np.ones((1, 2)), [1.0]))


class TestDataset:
    def test_bad_labels(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1)), [0, 1])

    def test_nan(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan]]), [1])

    def test_delimited_roundtrip(self, tmp_path):
        train, _ = generate_synthetic(SynthConfig(n_train=20, n_test=5))
        save_delimited(train, tmp_path / "t.csv")
        back = load_delimited(tmp_path / "t.csv", "y")
        np.testing.assert_array_equal(back.X, train.X)
        np.testing.assert_array_equal(back.y, train.y)

    def test_delimited_missing_label(self, tmp_path):
        (tmp_path / "t.csv").write_text("a,b\n1,1\n")
        with pytest.raises(ConfigError):
            load_delimited(tmp_path / "t.csv", "y")
