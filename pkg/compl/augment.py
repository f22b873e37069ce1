"""
Augmentation pipelines. Target samples get geometric augmentation applied
congruently to the image and every label map; self-supervised inputs get
a pair of offset crops with independent photometric jitter
"""

from __future__ import annotations
from typing import Optional, Tuple, Union

import logging

import attr
import numpy as np
from scipy.ndimage import gaussian_filter

from .nn import interpolation_matrix
from .synthetic import SyntheticSample

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()

SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)
JITTER = 0.2
BLUR_SIGMA = (0.1, 1.0)
BLUR_PROB = 0.5

Seed = Union[int, np.random.Generator]


def _rng(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@attr.s(auto_attribs=True, frozen=True)
class CropGeometry(object):
    '''
    Attributes:
        crop_h: Crop height
        crop_w: Crop width
        offset: Row and column distance between the two views' corners
    '''
    crop_h: int = attr.ib(default=24, converter=int)
    crop_w: int = attr.ib(default=24, converter=int)
    offset: int = attr.ib(default=4, converter=int)

    def __attrs_post_init__(self):
        if self.crop_h < 1 or self.crop_w < 1 or self.offset < 0:
            raise ValueError(f"Invalid crop geometry {self}")

    def fits(self, height: int, width: int) -> bool:
        return (self.crop_h + self.offset <= height
                and self.crop_w + self.offset <= width)


def nearest_index(size: int, out: int) -> np.ndarray:
    '''
    Source index of every output position when resampling `size` samples
    to `out`, corner aligned
    '''
    if out == 1 or size == 1:
        return np.zeros(out, dtype=np.int64)
    pos = np.arange(out) * (size - 1) / (out - 1)
    return np.floor(pos + 0.5).astype(np.int64)


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    '''Nearest-neighbor resize over the last two axes'''
    rows = nearest_index(arr.shape[-2], out_h)
    cols = nearest_index(arr.shape[-1], out_w)
    return arr[..., rows[:, None], cols[None, :]]


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    '''Corner-aligned bilinear resize over the last two axes'''
    rows = interpolation_matrix(arr.shape[-2], out_h)
    cols = interpolation_matrix(arr.shape[-1], out_w)
    return rows @ arr @ cols.T


def _fit(arr: np.ndarray, r0: int, c0: int, h: int, w: int) -> np.ndarray:
    '''
    Window of size (h, w) whose corner sits at (r0, c0); negative corners
    pad by edge replication
    '''
    pad_r = max(0, -r0, r0 + h - arr.shape[-2])
    pad_c = max(0, -c0, c0 + w - arr.shape[-1])
    if pad_r or pad_c:
        widths = [(0, 0)] * (arr.ndim - 2) + [(pad_r, pad_r), (pad_c, pad_c)]
        arr = np.pad(arr, widths, mode="edge")
        r0, c0 = r0 + pad_r, c0 + pad_c
    return arr[..., r0:r0 + h, c0:c0 + w]


def target_augment(sample: SyntheticSample,
                   seed: Seed,
                   flip: Optional[bool] = None,
                   scale: Optional[float] = None) -> SyntheticSample:
    '''
    Random horizontal flip, scaling from {0.5, 0.75, ..., 2.0} and crop or
    pad back to the input size

    Images and depth are resampled bilinearly, class and boundary maps with
    nearest neighbor. Depth is divided by the scale factor since magnifying
    the image moves the scene closer.

    Args:
        sample: Sample to augment
        seed: Seed or generator driving the random choices
        flip: Force the flip decision
        scale: Force the scale factor

    Returns:
        Augmented sample of the input's size
    '''
    rng = _rng(seed)
    do_flip = rng.random() < 0.5
    factor = float(SCALES[int(rng.integers(len(SCALES)))])
    do_flip = do_flip if flip is None else flip
    factor = factor if scale is None else float(scale)

    image, depth = sample.image, sample.depth
    seg, boundary = sample.seg, sample.boundary
    if do_flip:
        image, depth = image[..., ::-1], depth[..., ::-1]
        seg, boundary = seg[..., ::-1], boundary[..., ::-1]

    h, w = depth.shape
    sh, sw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    if (sh, sw) != (h, w):
        image = resize_bilinear(image, sh, sw)
        depth = resize_bilinear(depth, sh, sw)
        seg = resize_nearest(seg, sh, sw)
        boundary = resize_nearest(boundary, sh, sw)
    depth = depth / factor

    # Crop inside a larger map, pad around a smaller one
    r0 = int(rng.integers(0, abs(sh - h) + 1))
    c0 = int(rng.integers(0, abs(sw - w) + 1))
    if sh < h:
        r0 = -r0
    if sw < w:
        c0 = -c0
    return SyntheticSample(
        image=np.ascontiguousarray(_fit(image, r0, c0, h, w)),
        depth=np.ascontiguousarray(_fit(depth, r0, c0, h, w)),
        seg=np.ascontiguousarray(_fit(seg, r0, c0, h, w)),
        boundary=np.ascontiguousarray(_fit(boundary, r0, c0, h, w)))


def sample_crop_corners(
        height: int, width: int, geom: CropGeometry,
        rng: np.random.Generator) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    '''
    Top-left corners of the query and key crops; the key corner is the
    query corner shifted by (offset, offset)

    Raises:
        ValueError: If the geometry does not fit the image
    '''
    if not geom.fits(height, width):
        logger.error(f"Crop {geom} does not fit a {height}x{width} image")
        raise ValueError(f"Crop geometry {geom} does not fit "
                         f"{height}x{width}")
    r = int(rng.integers(0, height - geom.crop_h - geom.offset + 1))
    c = int(rng.integers(0, width - geom.crop_w - geom.offset + 1))
    return (r, c), (r + geom.offset, c + geom.offset)


def ssl_jitter(view: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    '''
    Horizontal flip, brightness and contrast jitter and an optional
    Gaussian blur of one [3, H, W] view
    '''
    if rng.random() < 0.5:
        view = view[..., ::-1]
    view = view + rng.uniform(-JITTER, JITTER)
    mean = view.mean()
    view = (view - mean) * (1.0 + rng.uniform(-JITTER, JITTER)) + mean
    if rng.random() < BLUR_PROB:
        sigma = rng.uniform(*BLUR_SIGMA)
        view = gaussian_filter(view, sigma=(0, sigma, sigma), mode="reflect")
    return np.ascontiguousarray(np.clip(view, 0.0, 1.0))


def ssl_augment_pair(image: np.ndarray,
                     geom: CropGeometry,
                     seed: Seed,
                     jitter: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Two crops of one image at a fixed distance, each jittered independently

    Args:
        image: [3, H, W] image
        geom: Crop size and distance
        seed: Seed or generator
        jitter: Disable to return the raw crops

    Returns:
        (view_q, view_k), each [3, crop_h, crop_w]
    '''
    rng = _rng(seed)
    (rq, cq), (rk, ck) = sample_crop_corners(image.shape[-2], image.shape[-1],
                                             geom, rng)
    view_q = image[:, rq:rq + geom.crop_h, cq:cq + geom.crop_w]
    view_k = image[:, rk:rk + geom.crop_h, ck:ck + geom.crop_w]
    if not jitter:
        return view_q.copy(), view_k.copy()
    return ssl_jitter(view_q, rng), ssl_jitter(view_k, rng)


def ssl_augment_single(image: np.ndarray, geom: CropGeometry,
                       seed: Seed) -> np.ndarray:
    '''One jittered crop, the input of the rotation pretext task'''
    rng = _rng(seed)
    (r, c), _ = sample_crop_corners(image.shape[-2], image.shape[-1],
                                    attr.evolve(geom, offset=0), rng)
    return ssl_jitter(image[:, r:r + geom.crop_h, c:c + geom.crop_w], rng)
