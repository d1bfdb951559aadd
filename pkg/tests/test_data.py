import json

import numpy as np
import pytest

from cc2dv2.data import (
    DatasetError,
    DatasetSplit,
    ImageSample,
    _make_deformation,
    generate_synthetic,
    load_dataset,
    normalize_intensity,
    read_annotations,
    read_label_set,
    rescale_coords,
    save_dataset,
    write_annotations,
    write_label_set,
)


class TestRescaleCoords:
    def test_native_to_resized_example(self):
        out = rescale_coords([[100, 200]], (2400, 1935), (384, 384))
        np.testing.assert_allclose(out, [[100 * 384 / 1935, 32.0]], rtol=0, atol=1e-12)
        np.testing.assert_allclose(out[0, 0], 19.845, atol=5e-4)

    def test_origin_is_fixed(self):
        np.testing.assert_array_equal(rescale_coords([[0, 0]], (17, 91), (384, 5)), [[0, 0]])

    def test_round_trip(self, rng):
        for _ in range(200):
            a = tuple(rng.integers(1, 4000, size=2))
            b = tuple(rng.integers(1, 4000, size=2))
            p = rng.uniform(0, 4000, size=(7, 2))
            back = rescale_coords(rescale_coords(p, a, b), b, a)
            np.testing.assert_allclose(back, p, rtol=0, atol=1e-9)

    def test_zero_axis_rejected(self):
        with pytest.raises(ValueError):
            rescale_coords([[1, 1]], (0, 10), (10, 10))


class TestImageSample:
    def test_out_of_bounds_landmark(self):
        with pytest.raises(ValueError, match="outside"):
            ImageSample("a", np.zeros((10, 20)), [[20.0, 3.0]], (10, 20), (0.1, 0.1))

    def test_edge_inside(self):
        s = ImageSample("a", np.zeros((10, 20)), [[19.999, 9.5]], (10, 20), (0.1, 0.1))
        assert s.size == (10, 20)

    def test_bad_spacing(self):
        with pytest.raises(ValueError):
            ImageSample("a", np.zeros((4, 4)), [[1, 1]], (4, 4), (0.0, 0.1))

    def test_split_rejects_mixed_counts(self):
        a = ImageSample("a", np.zeros((8, 8)), [[1, 1]], (8, 8), (1, 1))
        b = ImageSample("b", np.zeros((8, 8)), [[1, 1], [2, 2]], (8, 8), (1, 1))
        with pytest.raises(ValueError):
            DatasetSplit(a, [b])

    def test_split_rejects_duplicate_ids(self):
        a = ImageSample("a", np.zeros((8, 8)), [[1, 1]], (8, 8), (1, 1))
        with pytest.raises(ValueError):
            DatasetSplit(a, [a])


class TestNormalize:
    def test_min_max(self):
        out = normalize_intensity(np.array([[3.0, 5.0], [7.0, 11.0]]))
        np.testing.assert_allclose(out, [[0, 0.25], [0.5, 1.0]])

    def test_constant_image(self):
        np.testing.assert_array_equal(normalize_intensity(np.full((3, 3), 9.0)), 0)


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(3, 4, 2, (48, 48), n_test=1)
        b = generate_synthetic(3, 4, 2, (48, 48), n_test=1)
        for sa, sb in zip(a.samples(), b.samples()):
            assert sa.id == sb.id
            np.testing.assert_array_equal(sa.pixels, sb.pixels)
            np.testing.assert_array_equal(sa.landmarks, sb.landmarks)

    def test_seed_matters(self):
        a = generate_synthetic(3, 3, 2, (48, 48))
        b = generate_synthetic(4, 3, 2, (48, 48))
        assert not np.array_equal(a.template.pixels, b.template.pixels)

    def test_split_layout(self, small_split):
        assert small_split.template.id == "000"
        assert len(small_split.unlabeled) == 5 and len(small_split.test) == 2
        assert small_split.num_landmarks == 3
        for s in small_split.samples():
            assert s.pixels.dtype == np.float32
            assert 0.0 <= s.pixels.min() and s.pixels.max() <= 1.0

    def test_identity_deformation(self, rng):
        deform = _make_deformation(rng, (64, 64), 0.0)
        p = rng.uniform(0, 63, size=(10, 2))
        np.testing.assert_array_equal(deform.locate(p), p)

    def test_deformation_locate_inverts(self, rng):
        deform = _make_deformation(rng, (96, 96), 6.0)
        p = rng.uniform(20, 76, size=(20, 2))
        q = deform.locate(p)
        ux, uy = deform(q[:, 0], q[:, 1])
        np.testing.assert_allclose(q + np.column_stack([ux, uy]), p, atol=1e-8)

    def test_landmark_margin(self):
        # exhaustive scan: margin of half a 96 px patch on 192 px images
        split = generate_synthetic(11, 12, 5, (192, 192), margin=48)
        for s in split.samples():
            x, y = s.landmarks.T
            assert np.all(x >= 48) and np.all(y >= 48)
            assert np.all(x <= 191 - 48) and np.all(y <= 191 - 48)

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            generate_synthetic(0, 1, 2)
        with pytest.raises(ValueError):
            generate_synthetic(0, 3, 0)
        with pytest.raises(ValueError):
            generate_synthetic(0, 3, 40, (32, 32))


class TestDiskFormat:
    def test_annotation_round_trip(self, tmp_path, rng):
        pts = rng.uniform(0, 500, size=(6, 2))
        write_annotations(tmp_path / "a.txt", pts)
        np.testing.assert_array_equal(read_annotations(tmp_path / "a.txt"), pts)

    def test_bad_annotation_names_file(self, tmp_path):
        (tmp_path / "bad.txt").write_text("1 2\n3\n")
        with pytest.raises(DatasetError) as exc:
            read_annotations(tmp_path / "bad.txt")
        assert exc.value.path.endswith("bad.txt")

    def test_save_load_round_trip(self, tmp_path, small_split):
        save_dataset(small_split, tmp_path)
        loaded = load_dataset(tmp_path, (64, 64))
        assert [s.id for s in loaded.samples()] == [s.id for s in small_split.samples()]
        for a, b in zip(loaded.samples(), small_split.samples()):
            np.testing.assert_allclose(a.landmarks, b.landmarks, atol=1e-9)
            # 16-bit quantization plus per-image min-max renormalization
            assert np.abs(a.pixels - normalize_intensity(b.pixels)).max() < 1e-4
            assert a.spacing_mm == b.spacing_mm

    def test_resize_on_load(self, tmp_path, small_split):
        save_dataset(small_split, tmp_path)
        loaded = load_dataset(tmp_path, (32, 48))
        s = loaded.template
        assert s.size == (32, 48) and s.native_size == (64, 64)
        np.testing.assert_allclose(s.landmarks, small_split.template.landmarks * [48 / 64, 32 / 64])

    def test_inconsistent_landmark_count(self, tmp_path, small_split):
        save_dataset(small_split, tmp_path)
        (tmp_path / "annotations" / "003.txt").write_text("1 1\n2 2\n")
        with pytest.raises(DatasetError) as exc:
            load_dataset(tmp_path, (64, 64))
        assert exc.value.path.endswith("003.txt")

    def test_missing_image(self, tmp_path, small_split):
        save_dataset(small_split, tmp_path)
        (tmp_path / "images" / "002.png").unlink()
        with pytest.raises(DatasetError, match="002.png"):
            load_dataset(tmp_path, (64, 64))

    def test_global_spacing_fallback(self, tmp_path, small_split):
        save_dataset(small_split, tmp_path)
        meta = json.loads((tmp_path / "meta.json").read_text())
        meta.pop("images")
        meta["spacing_mm"] = [0.25, 0.5]
        (tmp_path / "meta.json").write_text(json.dumps(meta))
        assert load_dataset(tmp_path, (64, 64)).template.spacing_mm == (0.25, 0.5)

    def test_label_set_round_trip(self, tmp_path, small_split):
        labels = {s.id: s.landmarks + 0.5 for s in small_split.unlabeled}
        out = write_label_set(tmp_path, labels, small_split)
        assert out.name == "pseudo_labels"
        back = read_label_set(out, small_split)
        assert set(back) == set(labels)
        for k in labels:
            np.testing.assert_allclose(back[k], labels[k], atol=1e-9)
