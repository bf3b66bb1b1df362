import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssat_forge.data import (
    CIFAR_PIXELS,
    Dataset,
    DatasetError,
    generate_synthetic,
    load_cifar_binary,
    load_raw_dir,
    nearest_centroid_accuracy,
    parse_cifar_bytes,
    save_raw_dir,
)


def _cifar_record(label: int, rng, label_bytes: int = 1) -> tuple[bytes, np.ndarray]:
    pixels = rng.integers(0, 256, CIFAR_PIXELS, dtype=np.uint8)
    prefix = bytes([0] * (label_bytes - 1) + [label])
    return prefix + pixels.tobytes(), pixels


class TestCifar:
    def test_planes_become_hwc(self, rng):
        blob, pixels = _cifar_record(7, rng)
        ds = parse_cifar_bytes(blob)
        assert ds.images.shape == (1, 32, 32, 3) and ds.labels.tolist() == [7]
        # the red plane comes first in the file
        np.testing.assert_allclose(ds.images[0, 0, 1, 0], pixels[1] / 255.0)
        np.testing.assert_allclose(ds.images[0, 2, 3, 1], pixels[1024 + 2 * 32 + 3] / 255.0)

    def test_cifar100_uses_fine_label(self, rng):
        blob, _ = _cifar_record(42, rng, label_bytes=2)
        ds = parse_cifar_bytes(blob, layout="cifar100")
        assert ds.labels.tolist() == [42] and ds.num_classes == 100

    def test_truncated(self):
        with pytest.raises(DatasetError, match="truncated"):
            parse_cifar_bytes(bytes(3072))

    def test_label_out_of_range(self, rng):
        blob, _ = _cifar_record(5, rng)
        with pytest.raises(DatasetError, match="class count"):
            parse_cifar_bytes(blob, num_classes=3)

    def test_multiple_files(self, rng, tmp_path):
        for i in range(2):
            (tmp_path / f"b{i}.bin").write_bytes(b"".join(_cifar_record(i, rng)[0] for _ in range(3)))
        ds = load_cifar_binary([tmp_path / "b0.bin", tmp_path / "b1.bin"])
        assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]


class TestRawDir:
    def test_round_trip_at_8_bits(self, tmp_path):
        ds = generate_synthetic(3, 2, 8, seed=4)
        save_raw_dir(ds, tmp_path)
        back = load_raw_dir(tmp_path)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_allclose(back.images, ds.images, atol=0.5 / 255 + 1e-7)

    def test_label_count_checked(self, tmp_path):
        save_raw_dir(generate_synthetic(3, 2, 8), tmp_path)
        (tmp_path / "labels.txt").write_text("0\n1\n")
        with pytest.raises(DatasetError):
            load_raw_dir(tmp_path)


class TestDataset:
    def test_validates(self):
        with pytest.raises(DatasetError):
            Dataset(np.zeros((2, 4, 4, 3)), np.array([0, 3]), 3)
        with pytest.raises(DatasetError):
            Dataset(np.zeros((2, 4, 4)), np.array([0, 1]), 3)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.05, 1.0), st.integers(0, 100))
    def test_fraction_is_stratified(self, frac, seed):
        ds = generate_synthetic(3, 10, 8, seed=0)
        part = ds.fraction(frac, seed)
        counts = np.bincount(part.labels, minlength=3)
        assert np.all(counts == max(1, round(frac * 10)))

    def test_fraction_one_keeps_everything(self):
        ds = generate_synthetic(3, 5, 8)
        assert ds.fraction(1.0).digest() == ds.subset(np.arange(len(ds))).digest()


class TestSynthetic:
    def test_shapes_and_balance(self):
        ds = generate_synthetic(4, 25, 32, seed=1)
        assert ds.images.shape == (100, 32, 32, 3) and ds.images.dtype == np.float32
        assert np.bincount(ds.labels).tolist() == [25] * 4
        assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0

    def test_reproducible(self):
        assert generate_synthetic(seed=5).digest() == generate_synthetic(seed=5).digest()
        assert generate_synthetic(seed=5).digest() != generate_synthetic(seed=6).digest()

    def test_nearest_centroid_reference(self):
        # frozen regression value for the default 3-class 600/300 split
        train = generate_synthetic(3, 200, 32, seed=0)
        test = generate_synthetic(3, 100, 32, seed=1000, split="test")
        assert nearest_centroid_accuracy(train, test) == pytest.approx(0.4633333333333333, abs=1e-12)

    def test_tint_controls_colour_cue(self):
        train0, test0 = generate_synthetic(3, 100, 16, seed=0, tint=0.0), generate_synthetic(3, 60, 16, seed=9, tint=0.0)
        train1, test1 = generate_synthetic(3, 100, 16, seed=0, tint=1.0), generate_synthetic(3, 60, 16, seed=9, tint=1.0)
        assert nearest_centroid_accuracy(train1, test1) > nearest_centroid_accuracy(train0, test0)

    @pytest.mark.parametrize("kw", [dict(classes=1), dict(classes=9), dict(per_class=0), dict(image_size=4)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            generate_synthetic(**kw)
