"""
Procedural synthetic scenes with mutually consistent depth, class and
boundary maps, labeled-fraction splits and flat-binary dataset dumps
"""

from __future__ import annotations
from typing import Optional, Sequence, Tuple, Union

import json
import logging
import math
from pathlib import Path
from dataclasses import dataclass

import attr
import numpy as np

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()

SHAPE_KINDS = ("rectangle", "ellipse")
STANDARD_FRACTIONS = (0.01, 0.02, 0.05, 0.10, 0.20, 0.50, 1.00)


def _pair(value: Sequence) -> tuple:
    return tuple(value)


def _check_range(instance, attribute, value):
    if len(value) != 2 or value[0] > value[1]:
        raise ValueError(f"{attribute.name} must be an ordered pair, "
                         f"got {value}")


@attr.s(auto_attribs=True, frozen=True)
class DomainParams(object):
    '''
    Appearance and layout distribution of a synthetic domain

    Attributes:
        image_size: (H, W)
        num_shapes: Inclusive range of shapes per scene
        shape_kinds: Subset of rectangle, ellipse
        num_classes: Class count including background (class 0)
        depth_range: (near, far) depth bounds
        texture_noise_std: Std of the additive Gaussian texture noise
        palette_shift: Brightness offset applied to every class color
        shape_scale: Range of shape extents as a fraction of image size
    '''
    image_size: Tuple[int, int] = attr.ib(default=(32, 32), converter=_pair)
    num_shapes: Tuple[int, int] = attr.ib(default=(1, 4),
                                          converter=_pair,
                                          validator=_check_range)
    shape_kinds: Tuple[str, ...] = attr.ib(default=SHAPE_KINDS,
                                           converter=_pair)
    num_classes: int = 4
    depth_range: Tuple[float, float] = attr.ib(default=(1.0, 5.0),
                                               converter=_pair)
    texture_noise_std: float = 0.03
    palette_shift: float = 0.0
    shape_scale: Tuple[float, float] = attr.ib(default=(0.25, 0.6),
                                               converter=_pair,
                                               validator=_check_range)

    def __attrs_post_init__(self):
        near, far = self.depth_range
        if not 0 < near < far:
            raise ValueError(f"depth_range requires 0 < near < far, "
                             f"got {self.depth_range}")
        if self.num_classes < 2:
            raise ValueError("num_classes must include background and at "
                             "least one object class")
        if self.num_shapes[0] < 0:
            raise ValueError("num_shapes must be non-negative")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown or not self.shape_kinds:
            raise ValueError(f"Unknown shape kinds {unknown}")

    @classmethod
    def for_domain(cls,
                   domain: str,
                   image_size: int = 32,
                   num_classes: int = 4) -> DomainParams:
        '''
        Domain A is the training distribution. Domain B shares its classes
        but is brighter, noisier and has smaller shapes
        '''
        base = cls(image_size=(image_size, image_size),
                   num_classes=num_classes)
        if domain == "A":
            return base
        if domain == "B":
            return attr.evolve(base,
                               palette_shift=0.25,
                               texture_noise_std=2 * base.texture_noise_std,
                               shape_scale=(0.15, 0.35))
        raise ValueError(f"Unknown domain {domain}")


@dataclass
class SyntheticSample:
    '''
    Attributes:
        image: [3, H, W] in [0, 1]
        depth: [H, W] strictly positive
        seg: [H, W] integer class map
        boundary: [H, W] binary mask of label discontinuities
    '''
    image: np.ndarray
    depth: np.ndarray
    seg: np.ndarray
    boundary: np.ndarray


def class_palette(num_classes: int, shift: float = 0.0) -> np.ndarray:
    '''
    Fixed per-class base colors [C, 3]; background is mid grey
    '''
    palette = np.empty((num_classes, 3))
    palette[0] = 0.45
    phases = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0])
    for k in range(1, num_classes):
        hue = (k - 1) / max(num_classes - 1, 1)
        palette[k] = 0.5 + 0.4 * np.cos(2 * np.pi * (hue + phases))
    return np.clip(palette + shift, 0.0, 1.0)


def label_edges(seg: np.ndarray) -> np.ndarray:
    '''
    Pixels whose label differs from any 4-connected neighbour
    '''
    seg = np.asarray(seg)
    edges = np.zeros(seg.shape, dtype=bool)
    vertical = seg[1:, :] != seg[:-1, :]
    horizontal = seg[:, 1:] != seg[:, :-1]
    edges[1:, :] |= vertical
    edges[:-1, :] |= vertical
    edges[:, 1:] |= horizontal
    edges[:, :-1] |= horizontal
    return edges.astype(np.uint8)


def _shape_mask(kind: str, center: tuple, extent: tuple,
                grid: tuple) -> np.ndarray:
    rows, cols = grid
    (cr, cc), (hr, hc) = center, extent
    if kind == "rectangle":
        return (np.abs(rows - cr) <= hr) & (np.abs(cols - cc) <= hc)
    return ((rows - cr) / hr)**2 + ((cols - cc) / hc)**2 <= 1.0


def gen_scene(seed: Union[int, Sequence[int]],
              params: DomainParams) -> SyntheticSample:
    '''
    Render one scene of axis-aligned rectangles and ellipses in front of a
    planar background

    Each shape carries a class, a constant or planar depth and is drawn
    with a depth test so the nearer surface owns each pixel. The image is
    the class color shaded by depth plus Gaussian texture noise.

    Args:
        seed: Seed (or seed sequence entropy) of the scene
        params: Domain distribution

    Returns:
        Deterministic sample for (seed, params)
    '''
    rng = np.random.default_rng(seed)
    h, w = params.image_size
    near, far = params.depth_range
    span = far - near
    grid = np.mgrid[0:h, 0:w].astype(np.float64)

    # Background plane: far on the top row, far - span / 4 on the bottom
    depth = far - 0.25 * span * grid[0] / max(h - 1, 1)
    seg = np.zeros((h, w), dtype=np.int64)

    n_shapes = int(rng.integers(params.num_shapes[0],
                                params.num_shapes[1] + 1))
    lo, hi = params.shape_scale
    for _ in range(n_shapes):
        while True:
            kind = params.shape_kinds[int(rng.integers(len(
                params.shape_kinds)))]
            extent = (0.5 * h * rng.uniform(lo, hi),
                      0.5 * w * rng.uniform(lo, hi))
            center = (rng.uniform(0, h - 1), rng.uniform(0, w - 1))
            mask = _shape_mask(kind, center, extent, grid)
            if mask.any():
                break
        cls = int(rng.integers(1, params.num_classes))
        base = near + span * rng.uniform(0.15, 0.6)
        slope = (0.1 * span / max(h, w)) * rng.uniform(-1, 1, size=2)
        if rng.random() < 0.5:
            slope[:] = 0.0
        surface = (base + slope[0] * (grid[0] - center[0]) + slope[1] *
                   (grid[1] - center[1]))
        front = mask & (surface < depth)
        depth = np.where(front, surface, depth)
        seg = np.where(front, cls, seg)

    palette = class_palette(params.num_classes, params.palette_shift)
    shading = 1.0 - 0.5 * (depth - near) / span
    image = palette[seg].transpose(2, 0, 1) * shading[None]
    image = image + rng.normal(0.0, params.texture_noise_std, size=image.shape)
    return SyntheticSample(image=np.clip(image, 0.0, 1.0),
                           depth=depth,
                           seg=seg,
                           boundary=label_edges(seg))


@attr.s(auto_attribs=True, frozen=True)
class SplitSpec(object):
    fraction: float = attr.ib(default=1.0, converter=float)
    seed: int = attr.ib(default=0, converter=int)

    @fraction.validator
    def _check_fraction(self, attribute, value):
        if not 0.0 < value <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {value}")


def make_splits(n: int, spec: SplitSpec) -> np.ndarray:
    '''
    Labeled subset: the first ceil(fraction * n) entries of a seeded
    permutation, so subsets are nested across fractions for a fixed seed
    '''
    if n < 1:
        raise ValueError("Dataset must contain at least one sample")
    count = math.ceil(round(spec.fraction * n, 9))
    return np.random.default_rng(spec.seed).permutation(n)[:count]


class SyntheticDataset(object):
    '''
    Stacked samples of one split

    Attributes:
        images: [N, 3, H, W]
        depth: [N, H, W]
        seg: [N, H, W] int64
        boundary: [N, H, W] uint8
    '''
    def __init__(self,
                 images: np.ndarray,
                 depth: np.ndarray,
                 seg: np.ndarray,
                 boundary: np.ndarray,
                 params: Optional[DomainParams] = None,
                 seed: Optional[Union[int, Sequence[int]]] = None) -> None:
        self.images = images
        self.depth = depth
        self.seg = seg.astype(np.int64)
        self.boundary = boundary.astype(np.uint8)
        self.params = params
        self.seed = seed

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> SyntheticSample:
        return SyntheticSample(self.images[i], self.depth[i], self.seg[i],
                               self.boundary[i])

    def labels(self, task: str, indices: np.ndarray) -> np.ndarray:
        return {
            "depth": self.depth,
            "semseg": self.seg,
            "boundary": self.boundary
        }[task][indices]

    @classmethod
    def from_samples(cls,
                     samples: Sequence[SyntheticSample],
                     params: Optional[DomainParams] = None,
                     seed: Optional[Union[int, Sequence[int]]] = None
                     ) -> SyntheticDataset:
        return cls(np.stack([s.image for s in samples]),
                   np.stack([s.depth for s in samples]),
                   np.stack([s.seg for s in samples]),
                   np.stack([s.boundary for s in samples]), params, seed)


def make_dataset(n: int, params: DomainParams,
                 seed: Union[int, Sequence[int]]) -> SyntheticDataset:
    '''
    Generate `n` scenes, scene i seeded by (*seed, i)
    '''
    entropy = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    logger.debug(f"Generating {n} scenes with seed {entropy}")
    samples = [gen_scene(entropy + [i], params) for i in range(n)]
    return SyntheticDataset.from_samples(samples, params, seed)


_DUMP_FIELDS = ("images", "depth", "seg", "boundary")


def dump_dataset(dataset: SyntheticDataset, out_dir: Union[str, Path],
                 split: str) -> Path:
    '''
    Write `<split>.bin` (float64 arrays back to back) and a JSON sidecar
    `<split>.json` describing shapes and generation parameters

    Returns:
        Path to the binary file
    '''
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = [getattr(dataset, f).astype(np.float64) for f in _DUMP_FIELDS]
    binary = out_dir / f"{split}.bin"
    with open(binary, "wb") as f:
        for a in arrays:
            f.write(np.ascontiguousarray(a).tobytes())

    sidecar = {
        "split": split,
        "count": len(dataset),
        "seed": dataset.seed,
        "shapes": {k: list(a.shape)
                   for k, a in zip(_DUMP_FIELDS, arrays)},
        "params": attr.asdict(dataset.params) if dataset.params else None
    }
    with open(out_dir / f"{split}.json", "w") as f:
        json.dump(sidecar, f, indent=2)
    logger.info(f"Wrote {len(dataset)} samples to {binary}")
    return binary


def load_dataset(in_dir: Union[str, Path], split: str) -> SyntheticDataset:
    '''
    Read a split written by `dump_dataset`

    Raises:
        ValueError: If the binary size disagrees with the sidecar
    '''
    in_dir = Path(in_dir)
    with open(in_dir / f"{split}.json", "r") as f:
        sidecar = json.load(f)
    flat = np.fromfile(in_dir / f"{split}.bin", dtype=np.float64)

    arrays, offset = {}, 0
    for k in _DUMP_FIELDS:
        shape = tuple(sidecar["shapes"][k])
        size = int(np.prod(shape))
        arrays[k] = flat[offset:offset + size].reshape(shape)
        offset += size
    if offset != flat.size:
        raise ValueError(f"{split}.bin holds {flat.size} values, sidecar "
                         f"describes {offset}")

    params = DomainParams(**sidecar["params"]) if sidecar["params"] else None
    return SyntheticDataset(arrays["images"], arrays["depth"], arrays["seg"],
                            arrays["boundary"], params, sidecar["seed"])
