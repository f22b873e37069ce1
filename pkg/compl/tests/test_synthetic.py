import pytest
import numpy as np

import compl.synthetic as synthetic
from compl.synthetic import DomainParams, SplitSpec


@pytest.fixture
def params():
    return DomainParams.for_domain("A", image_size=16, num_classes=4)


def test_gen_scene_is_deterministic(params):
    a = synthetic.gen_scene(7, params)
    b = synthetic.gen_scene(7, params)
    for field in ("image", "depth", "seg", "boundary"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))


def test_gen_scene_value_ranges(params):
    for seed in range(10):
        s = synthetic.gen_scene(seed, params)
        assert s.image.shape == (3, 16, 16)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert np.all(s.depth > 0)
        assert s.seg.min() >= 0 and s.seg.max() < params.num_classes


def test_boundary_is_derived_from_labels(params):
    s = synthetic.gen_scene(3, params)
    np.testing.assert_array_equal(s.boundary, synthetic.label_edges(s.seg))


def test_objects_are_nearer_than_background(params):
    near, far = params.depth_range
    rows = np.arange(16, dtype=np.float64)[:, None] * np.ones((1, 16))
    plane = far - 0.25 * (far - near) * rows / 15
    for seed in range(10):
        s = synthetic.gen_scene(seed, params)
        objects = s.seg > 0
        np.testing.assert_allclose(s.depth[~objects], plane[~objects])
        assert np.all(s.depth[objects] < plane[objects])


def test_label_edges_of_single_step():
    seg = np.array([[0, 0, 1], [0, 0, 1]])
    np.testing.assert_array_equal(synthetic.label_edges(seg),
                                  [[0, 1, 1], [0, 1, 1]])


def test_label_edges_of_constant_map():
    assert synthetic.label_edges(np.zeros((4, 4))).sum() == 0


def test_domain_b_differs_in_appearance():
    a = DomainParams.for_domain("A")
    b = DomainParams.for_domain("B")
    assert b.num_classes == a.num_classes
    assert b.palette_shift > a.palette_shift
    assert b.texture_noise_std > a.texture_noise_std


def test_unknown_domain():
    with pytest.raises(ValueError):
        DomainParams.for_domain("C")


def test_domain_params_validation():
    with pytest.raises(ValueError):
        DomainParams(depth_range=(5.0, 1.0))
    with pytest.raises(ValueError):
        DomainParams(num_classes=1)
    with pytest.raises(ValueError):
        DomainParams(shape_kinds=("triangle", ))


@pytest.mark.parametrize("fraction,count", [(0.01, 1), (0.1, 7), (0.5, 32),
                                            (1.0, 64)])
def test_split_sizes(fraction, count):
    assert len(synthetic.make_splits(64, SplitSpec(fraction, 0))) == count


def test_splits_are_nested_across_fractions():
    small = synthetic.make_splits(50, SplitSpec(0.1, 4))
    large = synthetic.make_splits(50, SplitSpec(0.5, 4))
    assert set(small) <= set(large)
    np.testing.assert_array_equal(small, large[:len(small)])


def test_split_fraction_validation():
    with pytest.raises(ValueError):
        SplitSpec(0.0, 1)
    with pytest.raises(ValueError):
        SplitSpec(1.5, 1)


def test_standard_fractions_are_ordered():
    assert list(synthetic.STANDARD_FRACTIONS) == sorted(
        synthetic.STANDARD_FRACTIONS)
    assert synthetic.STANDARD_FRACTIONS[-1] == 1.0


def test_make_dataset_shapes_and_seeds(params):
    ds = synthetic.make_dataset(5, params, (3, 0))
    assert len(ds) == 5
    assert ds.images.shape == (5, 3, 16, 16)
    assert ds.seg.dtype == np.int64
    other = synthetic.make_dataset(5, params, (3, 1))
    assert not np.array_equal(ds.images, other.images)
    again = synthetic.make_dataset(5, params, (3, 0))
    np.testing.assert_array_equal(ds.images, again.images)


def test_dataset_labels_by_task(params):
    ds = synthetic.make_dataset(4, params, 2)
    idx = np.array([2, 0])
    np.testing.assert_array_equal(ds.labels("semseg", idx), ds.seg[idx])
    np.testing.assert_array_equal(ds.labels("depth", idx), ds.depth[idx])
    np.testing.assert_array_equal(ds.labels("boundary", idx),
                                  ds.boundary[idx])


def test_dump_and_load_dataset(params, tmp_path):
    ds = synthetic.make_dataset(3, params, (9, 0))
    synthetic.dump_dataset(ds, tmp_path, "train")
    assert (tmp_path / "train.bin").exists()
    assert (tmp_path / "train.json").exists()

    loaded = synthetic.load_dataset(tmp_path, "train")
    np.testing.assert_array_equal(loaded.images, ds.images)
    np.testing.assert_array_equal(loaded.seg, ds.seg)
    assert loaded.params == ds.params


def test_load_dataset_detects_truncation(params, tmp_path):
    ds = synthetic.make_dataset(2, params, 1)
    binary = synthetic.dump_dataset(ds, tmp_path, "val")
    data = binary.read_bytes()
    binary.write_bytes(data[:-8 * 10])
    with pytest.raises(ValueError):
        synthetic.load_dataset(tmp_path, "val")
