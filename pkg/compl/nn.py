"""
Layers, the encoder-decoder trunk and the task-specific prediction heads

Layers are fused autodiff ops over NCHW float64 tensors. Parameters live
in a flat `ModelParams` mapping whose key prefixes partition them into the
shared trunk (``trunk.``), target heads (``target.``) and the auxiliary
head (``aux.``).
"""

from __future__ import annotations
from typing import Dict, Iterator, Mapping, Optional, Tuple

import collections.abc
import logging
import zlib
from collections import OrderedDict
from dataclasses import dataclass

import attr
import numpy as np

from .autodiff import Op, Tape, Tensor, ShapeError, register_op, apply_op

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()

Shapes = Dict[str, Tuple[int, ...]]

GN_EPS = 1e-5
PROJ_DIM = 128


class DegenerateError(ValueError):
    """Raised when a projection collapses to the zero vector"""
    pass


@register_op("conv2d")
class _Conv2d(Op):
    @staticmethod
    def forward(ctx, x, w, b, stride, padding):
        n, c, h, wd = x.shape
        o, ci, kh, kw = w.shape
        if c != ci:
            raise ShapeError(f"conv2d expects {ci} input channels, got {c}")
        if h + 2 * padding < kh or wd + 2 * padding < kw:
            raise ShapeError(f"Kernel {kh}x{kw} larger than padded input "
                             f"{h + 2 * padding}x{wd + 2 * padding}")
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding),
                        (padding, padding)))

        # Columns ordered (c, i, j) to match w.reshape(o, -1)
        cols = np.stack([
            xp[:, :, i:i + stride * (ho - 1) + 1:stride,
               j:j + stride * (wo - 1) + 1:stride] for i in range(kh)
            for j in range(kw)
        ],
                        axis=2).reshape(n, c * kh * kw, ho, wo)
        w2 = w.reshape(o, -1)

        ctx.x_shape, ctx.w_shape = x.shape, w.shape
        ctx.stride, ctx.padding = stride, padding
        ctx.cols, ctx.w2 = cols, w2
        out = np.tensordot(w2, cols, axes=([1], [1])).transpose(1, 0, 2, 3)
        return out + b[None, :, None, None]

    @staticmethod
    def backward(ctx, grad):
        n, c, h, wd = ctx.x_shape
        o, _, kh, kw = ctx.w_shape
        s, p = ctx.stride, ctx.padding
        ho, wo = grad.shape[2:]

        dw = np.tensordot(grad, ctx.cols, axes=([0, 2, 3], [0, 2, 3]))
        db = grad.sum(axis=(0, 2, 3))

        dx = None
        if ctx.needs[0]:
            dcols = np.tensordot(ctx.w2, grad, axes=([0], [1]))
            dcols = dcols.transpose(1, 0, 2, 3).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + s * (ho - 1) + 1:s,
                        j:j + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
            dx = dxp[:, :, p:p + h, p:p + wd]
        return dx, dw.reshape(ctx.w_shape), db


@register_op("group_norm")
class _GroupNorm(Op):
    @staticmethod
    def forward(ctx, x, gamma, beta, groups, eps):
        n, c = x.shape[:2]
        if groups < 1 or c % groups:
            raise ShapeError(f"{c} channels not divisible into "
                             f"{groups} groups")
        xg = x.reshape(n, groups, -1)
        mu = xg.mean(axis=-1, keepdims=True)
        var = xg.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xg - mu) * inv

        ctx.shape, ctx.groups = x.shape, groups
        ctx.xhat, ctx.inv, ctx.gamma = xhat, inv, gamma
        affine = (-1, ) + (1, ) * (x.ndim - 2)
        return (xhat.reshape(x.shape) * gamma.reshape(affine) +
                beta.reshape(affine))

    @staticmethod
    def backward(ctx, grad):
        n, c = ctx.shape[:2]
        affine = (-1, ) + (1, ) * (len(ctx.shape) - 2)
        spatial = tuple(range(2, len(ctx.shape)))
        xhat = ctx.xhat.reshape(ctx.shape)

        dgamma = (grad * xhat).sum(axis=(0, ) + spatial)
        dbeta = grad.sum(axis=(0, ) + spatial)

        dxhat = (grad * ctx.gamma.reshape(affine)).reshape(n, ctx.groups, -1)
        dx = ctx.inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) -
                        ctx.xhat *
                        (dxhat * ctx.xhat).mean(axis=-1, keepdims=True))
        return dx.reshape(ctx.shape), dgamma, dbeta


@register_op("global_avg_pool")
class _GlobalAvgPool(Op):
    @staticmethod
    def forward(ctx, x):
        if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
            raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
        ctx.shape = x.shape
        return x.mean(axis=(2, 3))

    @staticmethod
    def backward(ctx, grad):
        h, w = ctx.shape[2:]
        g = grad[:, :, None, None] / (h * w)
        return (np.broadcast_to(g, ctx.shape).copy(), )


def pooling_matrix(size: int, grid: int) -> np.ndarray:
    '''
    Averaging matrix [grid, size] over near-equal contiguous partitions
    that cover the input exactly
    '''
    if grid > size:
        raise ShapeError(f"Grid {grid} exceeds spatial size {size}")
    m = np.zeros((grid, size))
    for i in range(grid):
        start, end = (i * size) // grid, ((i + 1) * size) // grid
        m[i, start:end] = 1.0 / (end - start)
    return m


def interpolation_matrix(size: int, out: int) -> np.ndarray:
    '''
    Corner-aligned linear interpolation matrix [out, size]
    '''
    m = np.zeros((out, size))
    for o in range(out):
        src = o * (size - 1) / (out - 1) if out > 1 else 0.0
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


@register_op("separable_resample")
class _SeparableResample(Op):
    '''Applies rows @ x @ cols.T over the two trailing axes'''
    @staticmethod
    def forward(ctx, x, rows, cols):
        ctx.rows, ctx.cols = rows, cols
        return rows @ x @ cols.T

    @staticmethod
    def backward(ctx, grad):
        return (ctx.rows.T @ grad @ ctx.cols, )


@register_op("linear")
class _Linear(Op):
    @staticmethod
    def forward(ctx, w, b, x):
        if x.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != w.shape[:1]:
            raise ShapeError(f"linear of W{w.shape}, b{b.shape} "
                             f"and x{x.shape}")
        ctx.w, ctx.x = w, x
        return x @ w.T + b

    @staticmethod
    def backward(ctx, grad):
        return grad.T @ ctx.x, grad.sum(axis=0), grad @ ctx.w


@register_op("l2_normalize")
class _L2Normalize(Op):
    @staticmethod
    def forward(ctx, x):
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        if np.any(norm < 1e-12):
            logger.error("Zero vector passed to l2_normalize")
            raise DegenerateError("Cannot normalize a zero vector")
        ctx.out, ctx.norm = x / norm, norm
        return ctx.out

    @staticmethod
    def backward(ctx, grad):
        dot = (grad * ctx.out).sum(axis=-1, keepdims=True)
        return ((grad - ctx.out * dot) / ctx.norm, )


@dataclass(frozen=True)
class ConvLayer:
    '''
    Zero-padded 2D cross-correlation

    Attributes:
        weights: Kernel [out_ch, in_ch, kh, kw]
        bias: Bias [out_ch]
    '''
    weights: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @classmethod
    def bind(cls,
             params: Mapping[str, Tensor],
             prefix: str,
             stride: int = 1,
             padding: int = 0) -> ConvLayer:
        return cls(params[f"{prefix}.weight"], params[f"{prefix}.bias"],
                   stride, padding)

    @staticmethod
    def shapes(prefix: str, in_ch: int, out_ch: int, k: int) -> Shapes:
        return {
            f"{prefix}.weight": (out_ch, in_ch, k, k),
            f"{prefix}.bias": (out_ch, )
        }


@dataclass(frozen=True)
class GroupNormLayer:
    '''
    Group normalization with per-channel affine
    '''
    num_groups: int
    gamma: Tensor
    beta: Tensor
    eps: float = GN_EPS

    @classmethod
    def bind(cls,
             params: Mapping[str, Tensor],
             prefix: str,
             num_groups: int,
             eps: float = GN_EPS) -> GroupNormLayer:
        return cls(num_groups, params[f"{prefix}.gamma"],
                   params[f"{prefix}.beta"], eps)

    @staticmethod
    def shapes(prefix: str, channels: int) -> Shapes:
        return {f"{prefix}.gamma": (channels, ), f"{prefix}.beta": (channels, )}


def conv2d(layer: ConvLayer, x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {x.shape}")
    return apply_op("conv2d",
                    x,
                    layer.weights,
                    layer.bias,
                    stride=layer.stride,
                    padding=layer.padding)


def group_norm(layer: GroupNormLayer, x: Tensor) -> Tensor:
    return apply_op("group_norm",
                    x,
                    layer.gamma,
                    layer.beta,
                    groups=layer.num_groups,
                    eps=layer.eps)


def global_avg_pool(x: Tensor) -> Tensor:
    return apply_op("global_avg_pool", x)


def adaptive_avg_pool(x: Tensor, grid: int) -> Tensor:
    '''
    Average-pool an NCHW tensor onto a grid x grid partition
    '''
    h, w = x.shape[2:]
    rows = pooling_matrix(h, grid)
    cols = pooling_matrix(w, grid)
    return apply_op("separable_resample", x, rows=rows, cols=cols)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    '''
    Corner-aligned bilinear resampling of an NCHW tensor
    '''
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"Invalid output size {out_h}x{out_w}")
    h, w = x.shape[2:]
    rows = interpolation_matrix(h, out_h)
    cols = interpolation_matrix(w, out_w)
    return apply_op("separable_resample", x, rows=rows, cols=cols)


def linear(w: Tensor, b: Tensor, x: Tensor) -> Tensor:
    return apply_op("linear", w, b, x)


def l2_normalize(x: Tensor) -> Tensor:
    '''
    Scale every vector along the last axis to unit L2 norm

    Raises:
        DegenerateError: If any vector is zero
    '''
    return apply_op("l2_normalize", x)


@attr.s(auto_attribs=True, frozen=True)
class TrunkModel(object):
    '''
    Encoder-decoder standing in for a dense-prediction backbone

    The encoder applies conv-GN-ReLU blocks with stride 2; the decoder
    upsamples back through the encoder's input sizes so the final feature
    map matches the input resolution.
    '''
    in_channels: int = 3
    widths: Tuple[int, ...] = (16, 32, 64)
    feature_dim: int = 16
    groups: int = 8

    @property
    def decoder_widths(self) -> Tuple[int, ...]:
        return tuple(reversed(self.widths[:-1])) + (self.feature_dim, )

    def param_shapes(self) -> Shapes:
        shapes = {}
        in_ch = self.in_channels
        for i, out_ch in enumerate(self.widths):
            shapes.update(self._block_shapes(f"trunk.enc{i + 1}", in_ch,
                                             out_ch))
            in_ch = out_ch
        for i, out_ch in enumerate(self.decoder_widths):
            shapes.update(self._block_shapes(f"trunk.dec{i + 1}", in_ch,
                                             out_ch))
            in_ch = out_ch
        return shapes

    @staticmethod
    def _block_shapes(prefix: str, in_ch: int, out_ch: int) -> Shapes:
        return {
            **ConvLayer.shapes(f"{prefix}.conv", in_ch, out_ch, 3),
            **GroupNormLayer.shapes(f"{prefix}.gn", out_ch)
        }

    def _block(self, params: Mapping[str, Tensor], prefix: str, x: Tensor,
               stride: int) -> Tensor:
        conv = ConvLayer.bind(params, f"{prefix}.conv", stride, padding=1)
        norm = GroupNormLayer.bind(params, f"{prefix}.gn", self.groups)
        return group_norm(norm, conv2d(conv, x)).relu()

    def __call__(self, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
        sizes = []
        h = x
        for i in range(len(self.widths)):
            sizes.append(h.shape[2:])
            h = self._block(params, f"trunk.enc{i + 1}", h, stride=2)
        for i, size in enumerate(reversed(sizes)):
            h = bilinear_upsample(h, *size)
            h = self._block(params, f"trunk.dec{i + 1}", h, stride=1)
        return h


@attr.s(auto_attribs=True, frozen=True)
class RotHead(object):
    '''Global average pooling followed by a 4-way fully connected layer'''
    feature_dim: int
    prefix: str = "aux.rot"

    def param_shapes(self) -> Shapes:
        return {
            f"{self.prefix}.fc.weight": (4, self.feature_dim),
            f"{self.prefix}.fc.bias": (4, )
        }

    def __call__(self, params: Mapping[str, Tensor],
                 features: Tensor) -> Tensor:
        return linear(params[f"{self.prefix}.fc.weight"],
                      params[f"{self.prefix}.fc.bias"],
                      global_avg_pool(features))


@attr.s(auto_attribs=True, frozen=True)
class MoCoHead(object):
    '''
    Global average pooling followed by a 2-layer MLP. The hidden width
    equals the trunk's feature dimension
    '''
    feature_dim: int
    prefix: str = "aux.moco"
    out_dim: int = PROJ_DIM

    def param_shapes(self) -> Shapes:
        f = self.feature_dim
        return {
            f"{self.prefix}.fc1.weight": (f, f),
            f"{self.prefix}.fc1.bias": (f, ),
            f"{self.prefix}.fc2.weight": (self.out_dim, f),
            f"{self.prefix}.fc2.bias": (self.out_dim, )
        }

    def __call__(self, params: Mapping[str, Tensor],
                 features: Tensor) -> Tensor:
        p = self.prefix
        h = linear(params[f"{p}.fc1.weight"], params[f"{p}.fc1.bias"],
                   global_avg_pool(features)).relu()
        return linear(params[f"{p}.fc2.weight"], params[f"{p}.fc2.bias"], h)


@attr.s(auto_attribs=True, frozen=True)
class DenseCLHead(object):
    '''
    MoCo-style global head plus a local branch: adaptive pooling onto a
    grid x grid map followed by two 1x1 convolutions
    '''
    feature_dim: int
    grid: int = 4
    prefix: str = "aux.densecl"
    out_dim: int = PROJ_DIM

    @property
    def global_head(self) -> MoCoHead:
        return MoCoHead(self.feature_dim, f"{self.prefix}.global",
                        self.out_dim)

    def param_shapes(self) -> Shapes:
        f = self.feature_dim
        return {
            **self.global_head.param_shapes(),
            **ConvLayer.shapes(f"{self.prefix}.local1", f, f, 1),
            **ConvLayer.shapes(f"{self.prefix}.local2", f, self.out_dim, 1)
        }

    def local(self, params: Mapping[str, Tensor], features: Tensor) -> Tensor:
        '''
        Returns:
            Unnormalized local embeddings [N, grid * grid, out_dim]
        '''
        h = adaptive_avg_pool(features, self.grid)
        h = conv2d(ConvLayer.bind(params, f"{self.prefix}.local1"), h).relu()
        h = conv2d(ConvLayer.bind(params, f"{self.prefix}.local2"), h)
        n = h.shape[0]
        return h.reshape(n, self.out_dim,
                         self.grid * self.grid).transpose(0, 2, 1)

    def __call__(self, params: Mapping[str, Tensor],
                 features: Tensor) -> Tensor:
        return self.global_head(params, features)


@attr.s(auto_attribs=True, frozen=True)
class HeadSet(object):
    '''
    Target heads (1x1 convolution per task) and an optional auxiliary
    head. The auxiliary head is only used while training
    '''
    feature_dim: int
    target_channels: Tuple[Tuple[str, int], ...] = ()
    aux_head: Optional[object] = None

    @property
    def tasks(self) -> Tuple[str, ...]:
        return tuple(t for t, _ in self.target_channels)

    def param_shapes(self) -> Shapes:
        shapes = {}
        for task, channels in self.target_channels:
            shapes.update(
                ConvLayer.shapes(f"target.{task}", self.feature_dim, channels,
                                 1))
        if self.aux_head is not None:
            shapes.update(self.aux_head.param_shapes())
        return shapes

    def predict(self, params: Mapping[str, Tensor], task: str,
                features: Tensor) -> Tensor:
        return conv2d(ConvLayer.bind(params, f"target.{task}"), features)


class ModelParams(collections.abc.MutableMapping):
    '''
    Ordered mapping of parameter name to float64 array

    Key prefixes partition the parameters: ``trunk.`` (shared),
    ``target.`` (target heads) and ``aux.`` (auxiliary head)
    '''
    def __init__(self, arrays: Optional[Mapping[str, np.ndarray]] = None):
        self._arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for k, v in (arrays or {}).items():
            self[k] = v

    def __getitem__(self, key: str) -> np.ndarray:
        return self._arrays[key]

    def __setitem__(self, key: str, value: np.ndarray) -> None:
        self._arrays[key] = np.ascontiguousarray(value, dtype=np.float64)

    def __delitem__(self, key: str) -> None:
        del self._arrays[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def partition(self, prefix: str) -> ModelParams:
        return ModelParams({
            k: v
            for k, v in self._arrays.items() if k.startswith(prefix + ".")
        })

    def copy(self) -> ModelParams:
        return ModelParams({k: v.copy() for k, v in self._arrays.items()})

    def shapes(self) -> Shapes:
        return {k: v.shape for k, v in self._arrays.items()}

    def bitwise_equal(self, other: Mapping[str, np.ndarray]) -> bool:
        if list(self.keys()) != list(other.keys()):
            return False
        return all(
            v.shape == other[k].shape and v.tobytes() == other[k].tobytes()
            for k, v in self._arrays.items())


class ParamView(collections.abc.Mapping):
    '''
    Read-only view that watches parameters on a tape on first access, so
    a tape's leaves are exactly the parameters a forward pass used
    '''
    def __init__(self, params: Mapping[str, np.ndarray], tape: Tape):
        self._params = params
        self._tape = tape

    def __getitem__(self, key: str) -> Tensor:
        return self._tape.watch(key, self._params[key])

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)


class ConstView(collections.abc.Mapping):
    '''Read-only view exposing parameters as constant tensors'''
    def __init__(self, params: Mapping[str, np.ndarray]):
        self._params = params
        self._cache: dict[str, Tensor] = {}

    def __getitem__(self, key: str) -> Tensor:
        if key not in self._cache:
            self._cache[key] = Tensor(self._params[key])
        return self._cache[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def init_params(trunk: TrunkModel, heads: HeadSet, seed: int) -> ModelParams:
    '''
    He-initialize every parameter of the trunk and heads

    Weights are drawn from N(0, 2 / fan_in), biases and GN shifts are zero
    and GN scales one. Each parameter has its own stream keyed by
    (seed, name), so adding a head never changes other parameters.

    Args:
        trunk: Shared encoder-decoder
        heads: Target and auxiliary heads
        seed: Master seed

    Returns:
        Initialized parameters in architecture order
    '''
    params = ModelParams()
    for name, shape in {**trunk.param_shapes(), **heads.param_shapes()}.items():
        if name.endswith(".bias") or name.endswith(".beta"):
            params[name] = np.zeros(shape)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = _param_rng(seed, name).normal(
                0.0, np.sqrt(2.0 / fan_in), size=shape)
    logger.debug(f"Initialized {len(params)} parameter arrays with seed {seed}")
    return params
