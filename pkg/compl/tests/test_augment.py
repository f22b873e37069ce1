import pytest
import numpy as np

import compl.augment as augment
from compl.augment import CropGeometry
from compl.synthetic import DomainParams, SyntheticSample, gen_scene


@pytest.fixture
def sample():
    return gen_scene(4, DomainParams.for_domain("A", image_size=16))


@pytest.mark.parametrize("seed", range(8))
def test_target_augment_preserves_shapes(sample, seed):
    out = augment.target_augment(sample, seed)
    assert out.image.shape == sample.image.shape
    assert out.depth.shape == sample.depth.shape
    assert out.seg.shape == sample.seg.shape
    assert out.boundary.shape == sample.boundary.shape
    assert set(np.unique(out.seg)) <= set(np.unique(sample.seg))


def test_identity_augmentation(sample):
    out = augment.target_augment(sample, 0, flip=False, scale=1.0)
    np.testing.assert_array_equal(out.image, sample.image)
    np.testing.assert_array_equal(out.depth, sample.depth)
    np.testing.assert_array_equal(out.seg, sample.seg)


def test_flip_is_applied_to_every_map(sample):
    out = augment.target_augment(sample, 0, flip=True, scale=1.0)
    np.testing.assert_array_equal(out.image, sample.image[..., ::-1])
    np.testing.assert_array_equal(out.depth, sample.depth[..., ::-1])
    np.testing.assert_array_equal(out.seg, sample.seg[..., ::-1])
    np.testing.assert_array_equal(out.boundary, sample.boundary[..., ::-1])


@pytest.mark.parametrize("scale", [0.5, 2.0])
def test_depth_is_divided_by_scale(scale):
    flat = SyntheticSample(image=np.full((3, 8, 8), 0.5),
                           depth=np.full((8, 8), 3.0),
                           seg=np.zeros((8, 8), dtype=np.int64),
                           boundary=np.zeros((8, 8), dtype=np.uint8))
    out = augment.target_augment(flat, 1, flip=False, scale=scale)
    np.testing.assert_allclose(out.depth, 3.0 / scale)
    np.testing.assert_allclose(out.image, 0.5)


def test_target_augment_is_seeded(sample):
    a = augment.target_augment(sample, 12)
    b = augment.target_augment(sample, 12)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.seg, b.seg)


def test_nearest_index_corners():
    idx = augment.nearest_index(5, 9)
    assert idx[0] == 0 and idx[-1] == 4
    assert np.all(np.diff(idx) >= 0)


def test_crop_corners_are_offset():
    geom = CropGeometry(8, 8, 3)
    rng = np.random.default_rng(0)
    for _ in range(20):
        (rq, cq), (rk, ck) = augment.sample_crop_corners(12, 12, geom, rng)
        assert (rk - rq, ck - cq) == (3, 3)
        assert rk + 8 <= 12 and ck + 8 <= 12


def test_crop_that_does_not_fit():
    with pytest.raises(ValueError):
        augment.sample_crop_corners(10, 10, CropGeometry(8, 8, 3),
                                    np.random.default_rng(0))


def test_invalid_geometry():
    with pytest.raises(ValueError):
        CropGeometry(0, 8, 1)
    with pytest.raises(ValueError):
        CropGeometry(8, 8, -1)


def test_raw_pair_overlaps_by_offset(sample):
    geom = CropGeometry(10, 10, 2)
    q, k = augment.ssl_augment_pair(sample.image, geom, 5, jitter=False)
    assert q.shape == k.shape == (3, 10, 10)
    np.testing.assert_array_equal(q[:, 2:, 2:], k[:, :-2, :-2])


def test_jittered_pair_stays_in_range(sample):
    q, k = augment.ssl_augment_pair(sample.image, CropGeometry(12, 12, 4), 3)
    for view in (q, k):
        assert view.shape == (3, 12, 12)
        assert view.min() >= 0.0 and view.max() <= 1.0


def test_single_crop_ignores_offset(sample):
    view = augment.ssl_augment_single(sample.image, CropGeometry(16, 16, 4),
                                      0)
    assert view.shape == (3, 16, 16)
