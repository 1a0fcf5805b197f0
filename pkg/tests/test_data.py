"""Slice file format, manifests, preprocessing, and the phantom generator."""

import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cevae.data import (
    DatasetManifest,
    DegenerateInputError,
    ManifestEntry,
    PhantomConfig,
    SliceFormatError,
    SliceSample,
    generate_phantoms,
    load_manifest,
    preprocess_patient,
    read_slice,
    read_slice_header,
    resample,
    save_manifest,
    write_slice,
    zscore_normalize,
)


class TestSliceIO:
    def test_float32_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((13, 7)).astype(np.float32)
        p = tmp_path / "a.slc"
        write_slice(p, arr)
        back = read_slice(p)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, arr)

    def test_uint8_round_trip(self, tmp_path):
        arr = (np.arange(12, dtype=np.uint8) % 2).reshape(3, 4)
        p = tmp_path / "m.msk"
        write_slice(p, arr)
        back = read_slice(p)
        assert back.dtype == np.uint8
        np.testing.assert_array_equal(back, arr)

    @given(
        hnp.arrays(
            np.float32,
            hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=16),
            elements=st.floats(-1e6, 1e6, width=32),
        )
    )
    def test_round_trip_bit_exact(self, arr):
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "x.slc"
            write_slice(p, arr)
            np.testing.assert_array_equal(read_slice(p), arr)

    def test_header_without_payload_read(self, tmp_path):
        p = tmp_path / "a.slc"
        write_slice(p, np.zeros((5, 9), dtype=np.float32))
        assert read_slice_header(p) == (5, 9, 1)

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(ValueError, match="2D"):
            write_slice(tmp_path / "x.slc", np.zeros((2, 2, 2)))

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "x.slc"
        write_slice(p, np.zeros((2, 2), dtype=np.float32))
        raw = bytearray(p.read_bytes())
        raw[:4] = b"JUNK"
        p.write_bytes(bytes(raw))
        with pytest.raises(SliceFormatError):
            read_slice(p)

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "x.slc"
        write_slice(p, np.ones((4, 4), dtype=np.float32))
        raw = p.read_bytes()
        p.write_bytes(raw[:-8])
        with pytest.raises(SliceFormatError):
            read_slice(p)


class TestSliceSample:
    def test_mask_shape_must_match(self):
        with pytest.raises(ValueError, match="mask shape"):
            SliceSample("p", 0, np.zeros((4, 4)), mask=np.zeros((3, 3)))

    def test_mask_values_binary(self):
        with pytest.raises(ValueError, match="0/1"):
            SliceSample("p", 0, np.zeros((2, 2)), mask=np.full((2, 2), 3, np.uint8))

    def test_is_anomalous(self):
        img = np.zeros((2, 2))
        assert not SliceSample("p", 0, img).is_anomalous
        assert not SliceSample("p", 0, img, mask=np.zeros((2, 2), np.uint8)).is_anomalous
        m = np.zeros((2, 2), np.uint8)
        m[0, 0] = 1
        assert SliceSample("p", 0, img, mask=m).is_anomalous


class TestManifest:
    def _write_pair(self, root, name, res=8, with_mask=False):
        write_slice(root / f"{name}.slc", np.zeros((res, res), np.float32))
        if with_mask:
            write_slice(root / f"{name}.msk", np.zeros((res, res), np.uint8))
            return ManifestEntry("p0", f"{name}.slc", f"{name}.msk", "test")
        return ManifestEntry("p0", f"{name}.slc", "", "train")

    def test_round_trip(self, tmp_path):
        entries = [
            self._write_pair(tmp_path, "a"),
            ManifestEntry("p1", "b.slc", "b.msk", "test"),
        ]
        write_slice(tmp_path / "b.slc", np.zeros((8, 8), np.float32))
        write_slice(tmp_path / "b.msk", np.zeros((8, 8), np.uint8))
        man = DatasetManifest(entries=entries, resolution=8, root=tmp_path)
        save_manifest(man, tmp_path / "manifest.csv")
        back = load_manifest(tmp_path / "manifest.csv")
        assert back.entries == entries
        assert back.resolution == 8
        assert back.patients() == ["p0", "p1"]

    def test_missing_file_rejected(self, tmp_path):
        man = DatasetManifest(
            entries=[ManifestEntry("p0", "gone.slc", "", "train")],
            resolution=8,
            root=tmp_path,
        )
        save_manifest(man, tmp_path / "manifest.csv")
        with pytest.raises(SliceFormatError, match="missing file"):
            load_manifest(tmp_path / "manifest.csv")

    def test_bad_header_rejected(self, tmp_path):
        (tmp_path / "manifest.csv").write_text("a,b,c,d\n")
        with pytest.raises(SliceFormatError, match="header"):
            load_manifest(tmp_path / "manifest.csv")

    def test_patient_split_partition_enforced(self, tmp_path):
        self._write_pair(tmp_path, "a")
        self._write_pair(tmp_path, "b")
        man = DatasetManifest(
            entries=[
                ManifestEntry("p0", "a.slc", "", "train"),
                ManifestEntry("p0", "b.slc", "", "test"),
            ],
            resolution=8,
            root=tmp_path,
        )
        save_manifest(man, tmp_path / "manifest.csv")
        with pytest.raises(SliceFormatError, match="splits"):
            load_manifest(tmp_path / "manifest.csv")

    def test_inconsistent_resolution_rejected(self, tmp_path):
        write_slice(tmp_path / "a.slc", np.zeros((8, 8), np.float32))
        write_slice(tmp_path / "b.slc", np.zeros((16, 16), np.float32))
        man = DatasetManifest(
            entries=[
                ManifestEntry("p0", "a.slc", "", "train"),
                ManifestEntry("p1", "b.slc", "", "train"),
            ],
            resolution=8,
            root=tmp_path,
        )
        save_manifest(man, tmp_path / "manifest.csv")
        with pytest.raises(SliceFormatError, match="resolution"):
            load_manifest(tmp_path / "manifest.csv")

    def test_load_samples_indices_per_patient(self, tiny_manifest):
        samples = tiny_manifest.load_samples()
        by_pid: dict[str, list[int]] = {}
        for s in samples:
            by_pid.setdefault(s.patient_id, []).append(s.slice_index)
        for indices in by_pid.values():
            assert indices == list(range(len(indices)))

    def test_load_samples_split_filter(self, tiny_manifest, tiny_phantom_cfg):
        test_samples = tiny_manifest.load_samples("test")
        assert {s.split for s in test_samples} == {"test"}
        expected = tiny_phantom_cfg.n_test_patients * tiny_phantom_cfg.slices_per_patient
        assert len(test_samples) == expected


class TestZscore:
    def test_hand_example(self):
        out = zscore_normalize([np.array([[0.0, 0.0], [2.0, 2.0]])])
        np.testing.assert_allclose(out[0], [[-1.0, -1.0], [1.0, 1.0]])

    def test_pooled_across_slices(self):
        # slices [0,0] and [2,2] pooled: mean 1, std 1
        a, b = zscore_normalize([np.zeros((1, 2)), np.full((1, 2), 2.0)])
        np.testing.assert_allclose(a, [[-1.0, -1.0]])
        np.testing.assert_allclose(b, [[1.0, 1.0]])

    def test_constant_input_raises_with_patient_name(self):
        with pytest.raises(DegenerateInputError, match="patient 'p9'"):
            zscore_normalize([np.ones((4, 4))], patient_id="p9")

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            zscore_normalize([])

    @given(
        st.lists(
            hnp.arrays(
                np.float64,
                (4, 4),
                elements=st.floats(-100, 100),
            ),
            min_size=1,
            max_size=4,
        )
    )
    def test_pooled_moments(self, slices):
        pooled = np.concatenate([s.ravel() for s in slices])
        if pooled.std() < 1e-9:
            return
        out = zscore_normalize(slices)
        flat = np.concatenate([o.ravel() for o in out])
        assert abs(flat.mean()) < 1e-9
        assert abs(flat.std() - 1.0) < 1e-9


class TestResample:
    def test_identity_at_same_size(self):
        rng = np.random.default_rng(0)
        img = rng.standard_normal((8, 8))
        np.testing.assert_array_equal(resample(img, 8), img)

    def test_checkerboard_mean_preserved(self):
        # 128x128 unit checkerboard downsampled to 64 keeps its mean
        idx = np.arange(128)
        board = ((idx[:, None] + idx[None, :]) % 2).astype(np.float64)
        out = resample(board, 64)
        assert out.shape == (64, 64)
        assert abs(out.mean() - board.mean()) < 1e-3

    def test_matches_torch_bilinear(self):
        # independent route: torch's pixel-center-aligned bilinear resize
        rng = np.random.default_rng(1)
        for src, dst in [(16, 8), (8, 16), (12, 7), (7, 12)]:
            img = rng.standard_normal((src, src))
            ours = resample(img, dst)
            theirs = torch.nn.functional.interpolate(
                torch.from_numpy(img)[None, None],
                size=(dst, dst),
                mode="bilinear",
                align_corners=False,
            )[0, 0].numpy()
            np.testing.assert_allclose(ours, theirs, atol=1e-12)

    @given(
        st.floats(-10, 10),
        st.sampled_from([(4, 7), (7, 4), (8, 8), (3, 16)]),
    )
    def test_constant_stays_constant(self, value, sizes):
        src, dst = sizes
        out = resample(np.full((src, src), value), dst)
        np.testing.assert_array_equal(out, np.full((dst, dst), value))

    def test_rejects_bad_target(self):
        with pytest.raises(ValueError):
            resample(np.zeros((4, 4)), 0)


class TestPreprocess:
    def test_normalize_first_order(self):
        slices = [np.arange(16, dtype=np.float64).reshape(4, 4)]
        got = preprocess_patient(slices, 8, order="normalize_first")
        want = [resample(s, 8) for s in zscore_normalize(slices)]
        np.testing.assert_array_equal(got[0], want[0])

    def test_resample_first_order(self):
        slices = [np.arange(16, dtype=np.float64).reshape(4, 4)]
        got = preprocess_patient(slices, 8, order="resample_first")
        want = zscore_normalize([resample(s, 8) for s in slices])
        np.testing.assert_array_equal(got[0], want[0])

    def test_unknown_order(self):
        with pytest.raises(ValueError, match="order"):
            preprocess_patient([np.zeros((4, 4))], 8, order="bogus")


class TestPhantomConfig:
    def test_defaults_valid(self):
        PhantomConfig()

    @pytest.mark.parametrize(
        "kw",
        [
            {"n_train_patients": -1},
            {"slices_per_patient": 0},
            {"anomaly_fraction": -0.1},
            {"anomaly_fraction": 1.5},
            {"resolution": 16},  # default radius range too large for 16px
            {"anomaly_radius_range": (10, 4)},
        ],
    )
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ValueError):
            PhantomConfig(**kw)


class TestPhantomGenerator:
    def test_counts_and_splits(self, tmp_path):
        cfg = PhantomConfig(
            n_train_patients=3,
            n_val_patients=1,
            n_test_patients=2,
            slices_per_patient=4,
            anomaly_fraction=0.5,
            anomaly_radius_range=(2, 4),
            resolution=16,
            seed=0,
        )
        man = generate_phantoms(cfg, tmp_path)
        assert len(man.entries) == 6 * 4
        assert len(man.patients("train")) == 3
        assert len(man.patients("val")) == 1
        assert len(man.patients("test")) == 2
        assert man.resolution == 16

    def test_anomaly_count_matches_fraction(self, tmp_path):
        # 10 test patients x 20 slices x fraction 0.5: 100 anomalous, 100 clean
        cfg = PhantomConfig(
            n_train_patients=1,
            n_val_patients=1,
            n_test_patients=10,
            slices_per_patient=20,
            anomaly_fraction=0.5,
            anomaly_radius_range=(2, 4),
            resolution=16,
            seed=0,
        )
        man = generate_phantoms(cfg, tmp_path)
        samples = man.load_samples("test")
        n_anom = sum(s.is_anomalous for s in samples)
        assert n_anom == 100
        assert len(samples) - n_anom == 100

    def test_train_and_val_have_no_anomalies(self, tiny_manifest):
        for split in ("train", "val"):
            for s in tiny_manifest.load_samples(split):
                assert not s.is_anomalous

    def test_anomalous_masks_align_with_intensity_shift(self, tiny_manifest):
        # inside-mask mean exceeds outside-mask mean for injected anomalies
        hits = 0
        for s in tiny_manifest.load_samples("test"):
            if not s.is_anomalous:
                continue
            inside = s.image[s.mask == 1].mean()
            outside = s.image[s.mask == 0].mean()
            assert inside > outside
            hits += 1
        assert hits > 0

    def test_deterministic(self, tmp_path):
        cfg = PhantomConfig(
            n_train_patients=2,
            n_val_patients=1,
            n_test_patients=2,
            slices_per_patient=3,
            anomaly_radius_range=(2, 4),
            resolution=16,
            seed=3,
        )
        m1 = generate_phantoms(cfg, tmp_path / "a")
        m2 = generate_phantoms(cfg, tmp_path / "b")
        for e1, e2 in zip(m1.entries, m2.entries, strict=True):
            assert e1.patient_id == e2.patient_id
            b1 = ((tmp_path / "a") / e1.slice_path).read_bytes()
            b2 = ((tmp_path / "b") / e2.slice_path).read_bytes()
            assert b1 == b2

    def test_parallel_matches_serial(self, tmp_path):
        cfg = PhantomConfig(
            n_train_patients=2,
            n_val_patients=1,
            n_test_patients=2,
            slices_per_patient=3,
            anomaly_radius_range=(2, 4),
            resolution=16,
            seed=5,
        )
        m1 = generate_phantoms(cfg, tmp_path / "serial", max_workers=1)
        m2 = generate_phantoms(cfg, tmp_path / "par", max_workers=4)
        assert [e.slice_path for e in m1.entries] == [e.slice_path for e in m2.entries]
        for e in m1.entries:
            assert (
                (tmp_path / "serial" / e.slice_path).read_bytes()
                == (tmp_path / "par" / e.slice_path).read_bytes()
            )

    def test_seed_changes_content(self, tmp_path):
        cfg = PhantomConfig(
            n_train_patients=1,
            n_val_patients=1,
            n_test_patients=1,
            slices_per_patient=2,
            anomaly_radius_range=(2, 4),
            resolution=16,
            seed=0,
        )
        m1 = generate_phantoms(cfg, tmp_path / "a")
        cfg2 = PhantomConfig(
            n_train_patients=1,
            n_val_patients=1,
            n_test_patients=1,
            slices_per_patient=2,
            anomaly_radius_range=(2, 4),
            resolution=16,
            seed=1,
        )
        m2 = generate_phantoms(cfg2, tmp_path / "b")
        e1, e2 = m1.entries[0], m2.entries[0]
        assert (
            (tmp_path / "a" / e1.slice_path).read_bytes()
            != (tmp_path / "b" / e2.slice_path).read_bytes()
        )

    def test_slices_are_patient_zscored(self, tiny_manifest):
        # pooled per-patient moments: mean 0, std 1 (float32 storage tolerance)
        samples = tiny_manifest.load_samples("train")
        by_pid: dict[str, list[np.ndarray]] = {}
        for s in samples:
            by_pid.setdefault(s.patient_id, []).append(s.image)
        for imgs in by_pid.values():
            pooled = np.concatenate([i.ravel() for i in imgs]).astype(np.float64)
            assert abs(pooled.mean()) < 1e-4
            assert abs(pooled.std() - 1.0) < 1e-4

    def test_manifest_loadable_from_disk(self, tiny_manifest):
        man = load_manifest(tiny_manifest.root / "manifest.csv")
        assert man.entries == tiny_manifest.entries
