"""
Minimal reverse-mode automatic differentiation over float64 numpy arrays

Operations are registered with `register_op` as classes implementing a
`forward` and a vector-Jacobian `backward`. Applying an operation to a
grad-enabled `Tensor` records one node on that tensor's `Tape`;
`backward` consumes the tape and returns a `GradMap` keyed by the names
under which parameters were watched.
"""

from __future__ import annotations
from typing import Any, Callable, Dict, Optional, Sequence, Union

import logging
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()

# Assert finite outputs after every op, switched off with
# TrainConfig.check_finite for production runs
CHECK_FINITE = True


class AutodiffError(ValueError):
    """Base error for tensor construction and op contracts"""
    pass


class ShapeError(AutodiffError):
    """Raised on shape, length or axis mismatches"""
    pass


class DomainError(AutodiffError):
    """Raised when an op leaves its numerical domain"""
    pass


class TapeError(RuntimeError):
    """Raised on misuse of a computation tape"""
    pass


class Op(object):
    '''
    Differentiable operation. Subclasses implement `forward`, storing
    whatever `backward` needs on `ctx`, and `backward`, returning one
    gradient (or None) per array input
    '''

    name: str = ''

    @staticmethod
    def forward(ctx: SimpleNamespace, *arrays: np.ndarray,
                **attrs: Any) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: SimpleNamespace,
                 grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


_OPS: Dict[str, type] = {}


def register_op(name: str, override: Optional[bool] = False) -> Callable:
    '''
    Class decorator registering an `Op` under `name`

    Args:
        name: Key used by `apply_op` and the gradient-check suite
        override: Replace an existing registration

    Raises:
        KeyError: If `name` is already registered and override is False
    '''
    def wrapper(cls: type) -> type:
        if (name in _OPS) and not override:
            logger.error(f"Op {name} already registered as {_OPS[name]}")
            raise KeyError(name)
        cls.name = name
        _OPS[name] = cls
        return cls

    return wrapper


def view_ops() -> Dict[str, type]:
    '''
    Returns:
        Mapping of registered op names to their classes
    '''
    return dict(_OPS)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: 'Tensor'
    ctx: SimpleNamespace


class Tape(object):
    '''
    Ordered record of the ops applied to grad-enabled tensors

    Nodes are appended as ops execute so every node's inputs precede it.
    A tape is consumed by a single call to `backward`.
    '''
    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.frozen = False
        self._leaves: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def leaves(self) -> dict[str, Tensor]:
        return dict(self._leaves)

    def watch(self, name: str, values: Union[np.ndarray, Tensor]) -> Tensor:
        '''
        Register a grad-enabled leaf. Watching an already watched name
        returns the existing leaf

        Args:
            name: GradMap key for this leaf
            values: Array or Tensor holding the leaf's value

        Returns:
            Grad-enabled leaf tensor bound to this tape
        '''
        if self.frozen:
            raise TapeError("Cannot watch parameters on a consumed tape")
        if name in self._leaves:
            return self._leaves[name]
        data = values.data if isinstance(values, Tensor) else values
        leaf = Tensor(np.array(data, dtype=np.float64), tape=self, name=name)
        self._leaves[name] = leaf
        return leaf

    def record(self, op: str, inputs: tuple, output: Tensor,
               ctx: SimpleNamespace) -> None:
        if self.frozen:
            raise TapeError(f"Cannot record {op} on a consumed tape")
        self.nodes.append(Node(op, inputs, output, ctx))

    def release(self) -> None:
        self.nodes = []
        self.frozen = True


class Tensor(object):
    '''
    N-dimensional float64 array, optionally attached to a `Tape`

    Attributes:
        data: C-ordered float64 array
        tape: Tape recording ops on this tensor, None for constants
        name: Parameter name for watched leaves
    '''

    __slots__ = ('data', 'tape', 'name')

    def __init__(self,
                 data: np.ndarray,
                 tape: Optional[Tape] = None,
                 name: Optional[str] = None) -> None:
        # 0-d arrays stay 0-d so full reductions are scalars
        self.data = np.require(np.asarray(data, dtype=np.float64),
                               requirements="C")
        self.tape = tape
        self.name = name

    @property
    def grad_enabled(self) -> bool:
        return self.tape is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", grad_enabled" if self.grad_enabled else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: Tensor) -> Tensor:
        return elementwise("add", self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return elementwise("sub", self, other)

    def __mul__(self, other: Union[Tensor, float]) -> Tensor:
        if isinstance(other, Tensor):
            return elementwise("mul", self, other)
        return elementwise("scale", self, factor=float(other))

    def __rmul__(self, other: float) -> Tensor:
        return self.__mul__(other)

    def __truediv__(self, other: float) -> Tensor:
        return elementwise("scale", self, factor=1.0 / float(other))

    def __neg__(self) -> Tensor:
        return elementwise("neg", self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def relu(self) -> Tensor:
        return elementwise("relu", self)

    def exp(self) -> Tensor:
        return elementwise("exp", self)

    def log(self) -> Tensor:
        return elementwise("log", self)

    def sum(self, axes: Optional[Sequence[int]] = None) -> Tensor:
        return reduce("sum", self, axes)

    def mean(self, axes: Optional[Sequence[int]] = None) -> Tensor:
        return reduce("mean", self, axes)

    def reshape(self, *shape: int) -> Tensor:
        return apply_op("reshape", self, shape=tuple(shape))

    def transpose(self, *axes: int) -> Tensor:
        return apply_op("transpose", self, axes=tuple(axes))


GradMap = Dict[str, Tensor]


def tensor_new(shape: Sequence[int], values: Sequence[float]) -> Tensor:
    '''
    Construct a constant tensor

    Args:
        shape: Dimension sizes
        values: Row-major values, product(shape) of them

    Raises:
        ShapeError: If the number of values does not match `shape`
        DomainError: If any value is NaN or infinite
    '''
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"Negative dimension in shape {shape}")
    data = np.asarray(values, dtype=np.float64).reshape(-1)
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeError(f"Shape {shape} requires {int(np.prod(shape))} "
                         f"values, got {data.size}")
    if not np.all(np.isfinite(data)):
        raise DomainError("Tensor values must be finite")
    return Tensor(data.reshape(shape))


def _shared_tape(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise TapeError("Op inputs are recorded on different tapes")
    return next(iter(tapes.values()), None)


def apply_op(name: str, *inputs: Tensor, **attrs: Any) -> Tensor:
    '''
    Run a registered op, recording it when any input is grad-enabled

    Args:
        name: Registered op key
        inputs: Differentiable tensor inputs
        attrs: Non-differentiable keyword arguments for the op

    Returns:
        Output tensor, grad-enabled if any input is
    '''
    try:
        op = _OPS[name]
    except KeyError:
        logger.error(f"Op {name} has not been registered")
        raise

    tape = _shared_tape(inputs)
    ctx = SimpleNamespace(needs=tuple(t.grad_enabled for t in inputs))
    out = op.forward(ctx, *[t.data for t in inputs], **attrs)
    out = np.asarray(out, dtype=np.float64)
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        logger.error(f"Non-finite output from {name}")
        raise DomainError(f"{name} produced NaN or Inf")

    result = Tensor(out, tape=tape)
    if tape is not None:
        tape.record(name, inputs, result, ctx)
    return result


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires equal shapes, got "
                         f"{a.shape} and {b.shape}")


def elementwise(op: str,
                a: Tensor,
                b: Optional[Tensor] = None,
                factor: Optional[float] = None) -> Tensor:
    '''
    Elementwise op in {add, sub, mul, relu, exp, log, neg, scale}

    Args:
        op: Operation key
        a: First operand
        b: Second operand for binary ops
        factor: Scalar for `scale`

    Raises:
        ShapeError: Binary operands of different shapes
        DomainError: log of a non-positive value
    '''
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ShapeError(f"{op} requires two operands")
        _check_same_shape(a, b, op)
        return apply_op(op, a, b)
    if op == "scale":
        if factor is None:
            raise ShapeError("scale requires a factor")
        return apply_op(op, a, factor=factor)
    if op in ("relu", "exp", "log", "neg"):
        return apply_op(op, a)
    raise KeyError(f"Unknown elementwise op {op}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    '''
    Matrix product of a [m, k] and b [k, n]
    '''
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")
    return apply_op("matmul", a, b)


def _normalize_axes(axes: Optional[Sequence[int]], ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes, )
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"Axis {ax} invalid for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"Repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(op: str, a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    '''
    Sum or mean over `axes` (all axes when None, none when empty)
    '''
    if op not in ("sum", "mean"):
        raise KeyError(f"Unknown reduction {op}")
    return apply_op(op, a, axes=_normalize_axes(axes, a.ndim))


def backward(loss: Tensor) -> GradMap:
    '''
    Reverse pass over the loss's tape

    Args:
        loss: Grad-enabled scalar tensor

    Returns:
        GradMap holding d(loss)/d(p) for every watched parameter the
        loss depends on

    Raises:
        TapeError: If loss is non-scalar, constant, or its tape was
            already consumed
    '''
    if loss.size != 1:
        raise TapeError(f"backward requires a scalar loss, got {loss.shape}")
    if not loss.grad_enabled:
        raise TapeError("Loss does not depend on any watched parameter")
    tape = loss.tape
    if tape.frozen:
        raise TapeError("Tape has already been consumed by backward")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = _OPS[node.op].backward(node.ctx, g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.grad_enabled:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    gradmap = {
        name: Tensor(np.array(grads[id(leaf)]))
        for name, leaf in tape.leaves.items() if id(leaf) in grads
    }
    tape.release()
    return gradmap


def grad_check(f: Callable[[Tensor], Tensor],
               x: Tensor,
               eps: float = 1e-5) -> float:
    '''
    Compare `backward` against central finite differences

    Args:
        f: Scalar-valued function of one tensor
        x: Point of evaluation
        eps: Finite-difference step

    Returns:
        max over components of |g_ad - g_fd| / max(1, |g_fd|)
    '''
    if eps <= 0:
        raise ValueError("eps must be positive")

    tape = Tape()
    out = f(tape.watch("x", x))
    if out.size != 1:
        raise TapeError(f"grad_check requires a scalar function, "
                        f"got shape {out.shape}")
    if out.grad_enabled:
        g_ad = backward(out).get("x", Tensor(np.zeros(x.shape))).data
    else:
        g_ad = np.zeros(x.shape)

    base = x.data.reshape(-1)
    g_fd = np.empty_like(base)
    for i in range(base.size):
        xp = base.copy()
        xp[i] += eps
        xm = base.copy()
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(x.shape))).item()
        fm = f(Tensor(xm.reshape(x.shape))).item()
        g_fd[i] = (fp - fm) / (2 * eps)

    if base.size == 0:
        return 0.0
    err = np.abs(g_ad.reshape(-1) - g_fd) / np.maximum(1.0, np.abs(g_fd))
    return float(err.max())


# Primitive ops


@register_op("add")
class _Add(Op):
    @staticmethod
    def forward(ctx, a, b):
        return a + b

    @staticmethod
    def backward(ctx, grad):
        return grad, grad


@register_op("sub")
class _Sub(Op):
    @staticmethod
    def forward(ctx, a, b):
        return a - b

    @staticmethod
    def backward(ctx, grad):
        return grad, -grad


@register_op("mul")
class _Mul(Op):
    @staticmethod
    def forward(ctx, a, b):
        ctx.a, ctx.b = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.b, grad * ctx.a


@register_op("neg")
class _Neg(Op):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, grad):
        return (-grad, )


@register_op("scale")
class _Scale(Op):
    @staticmethod
    def forward(ctx, a, factor):
        ctx.factor = factor
        return a * factor

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.factor, )


@register_op("relu")
class _Relu(Op):
    @staticmethod
    def forward(ctx, a):
        ctx.mask = a > 0
        return np.where(ctx.mask, a, 0.0)

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.mask, )


@register_op("exp")
class _Exp(Op):
    @staticmethod
    def forward(ctx, a):
        ctx.out = np.exp(a)
        return ctx.out

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.out, )


@register_op("log")
class _Log(Op):
    @staticmethod
    def forward(ctx, a):
        if np.any(a <= 0):
            logger.error("log of non-positive value")
            raise DomainError("log requires strictly positive inputs")
        ctx.a = a
        return np.log(a)

    @staticmethod
    def backward(ctx, grad):
        return (grad / ctx.a, )


@register_op("matmul")
class _Matmul(Op):
    @staticmethod
    def forward(ctx, a, b):
        ctx.a, ctx.b = a, b
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        da = grad @ ctx.b.T if ctx.needs[0] else None
        db = ctx.a.T @ grad if ctx.needs[1] else None
        return da, db


def _unreduce(grad: np.ndarray, shape: tuple, axes: tuple) -> np.ndarray:
    '''Broadcast the gradient of a reduction back to the input shape'''
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return np.broadcast_to(np.reshape(grad, kept), shape).copy()


@register_op("sum")
class _Sum(Op):
    @staticmethod
    def forward(ctx, a, axes):
        ctx.shape, ctx.axes = a.shape, axes
        return np.sum(a, axis=axes) if axes else a.copy()

    @staticmethod
    def backward(ctx, grad):
        if not ctx.axes:
            return (grad, )
        return (_unreduce(grad, ctx.shape, ctx.axes), )


@register_op("mean")
class _Mean(Op):
    @staticmethod
    def forward(ctx, a, axes):
        ctx.shape, ctx.axes = a.shape, axes
        ctx.count = int(np.prod([a.shape[ax] for ax in axes]))
        if not axes:
            return a.copy()
        if ctx.count == 0:
            raise ShapeError("mean over an empty axis")
        return np.sum(a, axis=axes) / ctx.count

    @staticmethod
    def backward(ctx, grad):
        if not ctx.axes:
            return (grad, )
        return (_unreduce(grad, ctx.shape, ctx.axes) / ctx.count, )


@register_op("reshape")
class _Reshape(Op):
    @staticmethod
    def forward(ctx, a, shape):
        if int(np.prod(shape)) != a.size:
            raise ShapeError(f"Cannot reshape {a.shape} into {shape}")
        ctx.shape = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx.shape), )


@register_op("transpose")
class _Transpose(Op):
    @staticmethod
    def forward(ctx, a, axes):
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"Invalid permutation {axes} for {a.shape}")
        ctx.inverse = tuple(np.argsort(axes))
        return a.transpose(axes)

    @staticmethod
    def backward(ctx, grad):
        return (grad.transpose(ctx.inverse), )
