"""Dataset plumbing tests: manifests, splits, image I/O, synthetic data."""

import numpy as np
import pytest

from maskad.data import (LABEL_ABNORMAL, LABEL_NORMAL, ContaminationError,
                         LabeledSlice, ManifestError, ScanRecord, SliceEntry,
                         SliceManifest, SliceRecord, SynthCounts, SynthSpec,
                         build_splits, ensure_normal_only,
                         generate_synth_dataset, inject_blobs, load_slice,
                         load_split, normalize_slice, read_scan_list,
                         synth_texture, write_slice)


def make_scans(n, slices_per_scan=4, abnormal_frac=0.25, seed=0):
    rng = np.random.default_rng(seed)
    scans = []
    for s in range(n):
        entries = []
        for i in range(slices_per_scan):
            abnormal = bool(rng.random() < abnormal_frac)
            entries.append(SliceEntry(f"scan{s:03d}_slice{i}", f"img/{s}_{i}.png",
                                      abnormal))
        scans.append(ScanRecord(f"scan{s:03d}", tuple(entries)))
    return scans


class TestManifest:

    def _records(self):
        return [SliceRecord("t0", "a.png", LABEL_NORMAL, "train"),
                SliceRecord("v0", "b.png", LABEL_ABNORMAL, "val"),
                SliceRecord("e0", "c.png", LABEL_NORMAL, "test")]

    def test_roundtrip(self, tmp_path):
        m = SliceManifest("demo", 32, 32, self._records(), root=tmp_path)
        m.save(tmp_path / "manifest.txt")
        back = SliceManifest.load(tmp_path / "manifest.txt", check_files=False)
        assert back.dataset == "demo"
        assert (back.height, back.width) == (32, 32)
        assert back.records == m.records

    def test_duplicate_ids_rejected(self):
        records = self._records() + [SliceRecord("t0", "d.png", LABEL_NORMAL, "train")]
        with pytest.raises(ManifestError):
            SliceManifest("demo", 32, 32, records)

    def test_unknown_label_and_split_rejected(self):
        with pytest.raises(ManifestError):
            SliceManifest("d", 8, 8, [SliceRecord("x", "x.png", "weird", "train")])
        with pytest.raises(ManifestError):
            SliceManifest("d", 8, 8, [SliceRecord("x", "x.png", LABEL_NORMAL, "dev")])

    def test_abnormal_in_train_is_contamination(self):
        with pytest.raises(ContaminationError):
            SliceManifest("d", 8, 8,
                          [SliceRecord("x", "x.png", LABEL_ABNORMAL, "train")])

    def test_missing_file_check(self, tmp_path):
        m = SliceManifest("d", 8, 8, [SliceRecord("x", "x.png", LABEL_NORMAL, "test")],
                          root=tmp_path)
        m.save(tmp_path / "manifest.txt")
        with pytest.raises(ManifestError):
            SliceManifest.load(tmp_path / "manifest.txt")

    def test_split_selector(self):
        m = SliceManifest("d", 8, 8, self._records())
        assert [r.sample_id for r in m.split("train")] == ["t0"]
        with pytest.raises(ManifestError):
            m.split("dev")


class TestBuildSplits:

    def test_fractions_round_half_up_and_ceil(self):
        scans = make_scans(10)
        m = build_splits(scans, dataset="d", height=8, width=8,
                         test_frac=0.4, val_frac=0.2, seed=0)
        scan_split = {}
        for rec in m.records:
            scan_id = rec.sample_id.split("_")[0]
            scan_split.setdefault(scan_id, set()).add(rec.split)
        # every scan lands in exactly one split
        assert all(len(s) == 1 for s in scan_split.values())
        counts = {"train": 0, "val": 0, "test": 0}
        for s in scan_split.values():
            counts[next(iter(s))] += 1
        # 10 scans: 4 test, ceil(6 * 0.2) = 2 val, 4 train
        assert counts == {"test": 4, "val": 2, "train": 4}

    def test_train_has_no_abnormal_slices(self):
        m = build_splits(make_scans(12, abnormal_frac=0.5), dataset="d",
                         height=8, width=8, seed=1)
        for rec in m.records:
            if rec.split == "train":
                assert rec.label == LABEL_NORMAL
        # val/test keep their abnormal slices
        assert any(r.label == LABEL_ABNORMAL for r in m.records)

    def test_seed_changes_assignment(self):
        scans = make_scans(10)
        a = build_splits(scans, dataset="d", height=8, width=8, seed=0)
        b = build_splits(scans, dataset="d", height=8, width=8, seed=0)
        c = build_splits(scans, dataset="d", height=8, width=8, seed=99)
        assert [r.split for r in a.records] == [r.split for r in b.records]
        assert ([r.split for r in a.records] != [r.split for r in c.records]
                or [r.sample_id for r in a.records] != [r.sample_id for r in c.records])

    def test_duplicate_scan_ids_rejected(self):
        scans = make_scans(3) + make_scans(1)
        with pytest.raises(ValueError):
            build_splits(scans, dataset="d", height=8, width=8)


class TestScanList:

    def test_parse_groups_by_scan(self, tmp_path):
        text = ("s1\ts1_a\timg/a.png\tnormal\n"
                "s1\ts1_b\timg/b.png\tabnormal\n"
                "s2\ts2_a\timg/c.png\tnormal\n"
                "# comment line\n")
        path = tmp_path / "scans.txt"
        path.write_text(text)
        scans = read_scan_list(path)
        assert [s.scan_id for s in scans] == ["s1", "s2"]
        assert scans[0].slices[1].abnormal is True

    def test_bad_label_rejected(self, tmp_path):
        path = tmp_path / "scans.txt"
        path.write_text("s1\ta\tx.png\tmaybe\n")
        with pytest.raises(ManifestError):
            read_scan_list(path)


class TestImageIO:

    def test_png_roundtrip_precision(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((16, 16))
        path = tmp_path / "x.png"
        write_slice(path, img)
        m = SliceManifest("d", 16, 16,
                          [SliceRecord("x", "x.png", LABEL_NORMAL, "test")],
                          root=tmp_path)
        back = load_slice(m, "x")
        # 16-bit quantization: worst-case error is half a level
        assert np.abs(back - img).max() <= 0.5 / 65535 + 1e-12
        assert back.dtype == np.float64

    def test_write_requires_unit_range(self, tmp_path):
        with pytest.raises(ValueError):
            write_slice(tmp_path / "x.png", np.full((4, 4), 1.5))

    def test_dims_checked_against_manifest(self, tmp_path):
        write_slice(tmp_path / "x.png", np.zeros((8, 8)))
        m = SliceManifest("d", 16, 16,
                          [SliceRecord("x", "x.png", LABEL_NORMAL, "test")],
                          root=tmp_path)
        with pytest.raises(ManifestError):
            load_slice(m, "x")

    def test_normalize_slice(self):
        raw = np.array([[2.0, 4.0], [6.0, 10.0]])
        out = normalize_slice(raw)
        np.testing.assert_allclose(out, [[0.0, 0.25], [0.5, 1.0]])
        np.testing.assert_array_equal(normalize_slice(np.full((3, 3), 7.0)),
                                      np.zeros((3, 3)))


class TestEnsureNormalOnly:

    def test_passes_clean_and_rejects_abnormal(self):
        clean = [LabeledSlice("a", np.zeros((4, 4)), LABEL_NORMAL)]
        ensure_normal_only(clean, "stage")
        dirty = clean + [LabeledSlice("b", np.zeros((4, 4)), LABEL_ABNORMAL)]
        with pytest.raises(ContaminationError):
            ensure_normal_only(dirty, "stage")


class TestSynthDataset:

    def test_texture_deterministic_unit_range(self):
        spec = SynthSpec(height=32, width=32)
        a = synth_texture(spec, 5)
        b = synth_texture(spec, 5)
        assert np.array_equal(a, b)
        assert a.min() == 0.0 and a.max() == 1.0

    def test_blobs_local_and_contained(self):
        spec = SynthSpec(height=32, width=32)
        base = synth_texture(spec, 1)
        out, mask = inject_blobs(base, spec, 7)
        assert mask.any()
        assert np.array_equal(out[~mask], base[~mask])
        assert out.min() >= 0.0 and out.max() <= 1.0
        # footprints never touch the border (full containment)
        assert not mask[0].any() and not mask[-1].any()
        assert not mask[:, 0].any() and not mask[:, -1].any()

    def test_generate_writes_consistent_manifest(self, tmp_path):
        counts = SynthCounts(train=4, val_normal=2, val_abnormal=2,
                             test_normal=3, test_abnormal=3)
        spec = SynthSpec(height=32, width=32)
        m = generate_synth_dataset(tmp_path, counts=counts, spec=spec, seed=3)
        assert len(m.records) == 14
        reloaded = SliceManifest.load(tmp_path / "manifest.txt")
        assert len(reloaded.records) == 14
        train = load_split(reloaded, "train")
        assert len(train) == 4
        assert all(s.label == LABEL_NORMAL for s in train)
        test = load_split(reloaded, "test")
        assert sum(s.label == LABEL_ABNORMAL for s in test) == 3
        for s in train + test:
            assert s.image.shape == (32, 32)
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0

    def test_regeneration_bit_identical(self, tmp_path):
        counts = SynthCounts(train=2, val_normal=1, val_abnormal=1,
                             test_normal=2, test_abnormal=2)
        spec = SynthSpec(height=32, width=32)
        generate_synth_dataset(tmp_path / "a", counts=counts, spec=spec, seed=9)
        generate_synth_dataset(tmp_path / "b", counts=counts, spec=spec, seed=9)
        for png in sorted((tmp_path / "a" / "images").iterdir()):
            other = tmp_path / "b" / "images" / png.name
            assert png.read_bytes() == other.read_bytes(), png.name

    def test_bad_counts_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            generate_synth_dataset(tmp_path, counts=SynthCounts(train=0))
