"""
Gradient acceptance suite: every registered op and the composite losses
are compared against central finite differences at random float64 points
"""

from __future__ import annotations
from typing import Callable, Dict, Iterable, List, Optional, TextIO, Tuple

import sys
import logging

import attr
import numpy as np

from .autodiff import Tensor, grad_check, view_ops
from . import nn
from . import tasks
from .auxiliary import mixins, densecl, moco, rotation

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()

TRIALS = 10
EPS = 1e-5
THRESHOLD = 1e-4

# A check draws a scalar function of one tensor and the point to test it at
Check = Callable[[np.random.Generator], Tuple[Callable[[Tensor], Tensor],
                                              np.ndarray]]

_CHECKS: Dict[str, List[Check]] = {}


def register_check(component: str) -> Callable[[Check], Check]:
    '''
    Decorator adding a gradient check under `component`. A component may
    hold several checks, one per differentiable input
    '''
    def wrapper(check: Check) -> Check:
        _CHECKS.setdefault(component, []).append(check)
        return check

    return wrapper


def view_checks() -> Dict[str, List[Check]]:
    return {k: list(v) for k, v in _CHECKS.items()}


def _projected(out: Tensor, weights: np.ndarray) -> Tensor:
    '''Scalar <out, weights> so every output component is exercised'''
    return (out * Tensor(weights)).sum()


def _unary(op: Callable[[Tensor], Tensor], x: np.ndarray,
           rng: np.random.Generator):
    shape = op(Tensor(x)).shape
    weights = rng.normal(size=shape)
    return (lambda t: _projected(op(t), weights)), x


# Elementwise and structural ops


@register_check("add")
def _check_add(rng):
    b = Tensor(rng.normal(size=(3, 4)))
    return _unary(lambda t: t + b, rng.normal(size=(3, 4)), rng)


@register_check("sub")
def _check_sub(rng):
    b = Tensor(rng.normal(size=(3, 4)))
    return _unary(lambda t: b - t, rng.normal(size=(3, 4)), rng)


@register_check("mul")
def _check_mul(rng):
    b = Tensor(rng.normal(size=(3, 4)))
    return _unary(lambda t: t * b, rng.normal(size=(3, 4)), rng)


@register_check("neg")
def _check_neg(rng):
    return _unary(lambda t: -t, rng.normal(size=(5, )), rng)


@register_check("scale")
def _check_scale(rng):
    factor = float(rng.normal())
    return _unary(lambda t: t * factor, rng.normal(size=(5, )), rng)


@register_check("relu")
def _check_relu(rng):
    # Keep inputs away from the kink
    x = rng.normal(size=(4, 5))
    x = np.where(np.abs(x) < 0.05, 0.1, x)
    return _unary(lambda t: t.relu(), x, rng)


@register_check("exp")
def _check_exp(rng):
    return _unary(lambda t: t.exp(), rng.uniform(-2, 2, size=(6, )), rng)


@register_check("log")
def _check_log(rng):
    return _unary(lambda t: t.log(), rng.uniform(0.5, 3.0, size=(6, )), rng)


@register_check("matmul")
def _check_matmul_left(rng):
    b = Tensor(rng.normal(size=(4, 2)))
    return _unary(lambda t: t @ b, rng.normal(size=(3, 4)), rng)


@register_check("matmul")
def _check_matmul_right(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    return _unary(lambda t: a @ t, rng.normal(size=(4, 2)), rng)


@register_check("sum")
def _check_sum(rng):
    return _unary(lambda t: t.sum(axes=(1, )), rng.normal(size=(3, 4, 2)),
                  rng)


@register_check("mean")
def _check_mean(rng):
    return _unary(lambda t: t.mean(axes=(0, 2)), rng.normal(size=(3, 4, 2)),
                  rng)


@register_check("reshape")
def _check_reshape(rng):
    return _unary(lambda t: t.reshape(4, 6), rng.normal(size=(2, 3, 4)), rng)


@register_check("transpose")
def _check_transpose(rng):
    return _unary(lambda t: t.transpose(2, 0, 1), rng.normal(size=(2, 3, 4)),
                  rng)


# Layers


def _conv_inputs(rng):
    return (rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)),
            rng.normal(size=(4, )))


@register_check("conv2d")
def _check_conv_input(rng):
    x, w, b = _conv_inputs(rng)
    layer = nn.ConvLayer(Tensor(w), Tensor(b), stride=2, padding=1)
    return _unary(lambda t: nn.conv2d(layer, t), x, rng)


@register_check("conv2d")
def _check_conv_weight(rng):
    x, w, b = _conv_inputs(rng)
    return _unary(
        lambda t: nn.conv2d(nn.ConvLayer(t, Tensor(b), 1, 1), Tensor(x)), w,
        rng)


@register_check("conv2d")
def _check_conv_bias(rng):
    x, w, b = _conv_inputs(rng)
    return _unary(
        lambda t: nn.conv2d(nn.ConvLayer(Tensor(w), t, 2, 1), Tensor(x)), b,
        rng)


def _gn_inputs(rng):
    return (rng.normal(size=(2, 4, 3, 3)), rng.uniform(0.5, 1.5, size=(4, )),
            rng.normal(size=(4, )))


@register_check("group_norm")
def _check_gn_input(rng):
    x, gamma, beta = _gn_inputs(rng)
    layer = nn.GroupNormLayer(2, Tensor(gamma), Tensor(beta))
    return _unary(lambda t: nn.group_norm(layer, t), x, rng)


@register_check("group_norm")
def _check_gn_gamma(rng):
    x, gamma, beta = _gn_inputs(rng)
    return _unary(
        lambda t: nn.group_norm(nn.GroupNormLayer(2, t, Tensor(beta)),
                                Tensor(x)), gamma, rng)


@register_check("group_norm")
def _check_gn_beta(rng):
    x, gamma, beta = _gn_inputs(rng)
    return _unary(
        lambda t: nn.group_norm(nn.GroupNormLayer(2, Tensor(gamma), t),
                                Tensor(x)), beta, rng)


@register_check("global_avg_pool")
def _check_gap(rng):
    return _unary(nn.global_avg_pool, rng.normal(size=(2, 3, 4, 5)), rng)


@register_check("separable_resample")
def _check_adaptive_pool(rng):
    return _unary(lambda t: nn.adaptive_avg_pool(t, 2),
                  rng.normal(size=(2, 3, 6, 5)), rng)


@register_check("separable_resample")
def _check_upsample(rng):
    return _unary(lambda t: nn.bilinear_upsample(t, 7, 5),
                  rng.normal(size=(1, 2, 3, 3)), rng)


@register_check("linear")
def _check_linear_input(rng):
    w, b = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, )))
    return _unary(lambda t: nn.linear(w, b, t), rng.normal(size=(4, 5)), rng)


@register_check("linear")
def _check_linear_weight(rng):
    x, b = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(3, )))
    return _unary(lambda t: nn.linear(t, b, x), rng.normal(size=(3, 5)), rng)


@register_check("linear")
def _check_linear_bias(rng):
    x, w = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(3, 5)))
    return _unary(lambda t: nn.linear(w, t, x), rng.normal(size=(3, )), rng)


@register_check("l2_normalize")
def _check_l2_normalize(rng):
    return _unary(nn.l2_normalize, rng.normal(size=(4, 6)), rng)


# Losses


@register_check("l1_loss")
def _check_l1(rng):
    gt = rng.normal(size=(2, 4, 4))
    # Offset predictions so no component sits on the kink
    pred = gt + rng.choice([-1.0, 1.0], size=gt.shape) * rng.uniform(
        0.1, 1.0, size=gt.shape)
    return (lambda t: tasks.l1_loss(t, gt)), pred


@register_check("softmax_cross_entropy")
def _check_semseg_ce(rng):
    labels = rng.integers(0, 3, size=(2, 4, 4))
    return (lambda t: tasks.ce_loss_semseg(t, labels)), rng.normal(
        size=(2, 3, 4, 4))


@register_check("weighted_bce")
def _check_boundary_bce(rng):
    gt = (rng.random(size=(2, 5, 5)) < 0.2).astype(np.float64)
    return (lambda t: tasks.weighted_bce_boundary(t, gt)), rng.normal(
        size=(2, 5, 5))


@register_check("rotation_ce")
def _check_rotation_ce(rng):
    labels = rng.integers(0, rotation.NUM_ROTATIONS, size=(5, ))
    return (lambda t: rotation.rotation_loss(t, labels)), rng.normal(
        size=(5, rotation.NUM_ROTATIONS))


@register_check("info_nce")
def _check_info_nce_pos(rng):
    neg = Tensor(rng.uniform(-1, 1, size=(4, 6)))
    tau = float(rng.choice([0.07, 0.2, 1.0]))
    return (lambda t: mixins.info_nce(t, neg, tau)), rng.uniform(-1,
                                                                 1,
                                                                 size=(4, ))


@register_check("info_nce")
def _check_info_nce_neg(rng):
    pos = Tensor(rng.uniform(-1, 1, size=(4, )))
    tau = float(rng.choice([0.07, 0.2, 1.0]))
    return (lambda t: mixins.info_nce(pos, t, tau)), rng.uniform(-1,
                                                                 1,
                                                                 size=(4, 6))


@register_check("densecl")
def _check_densecl(rng):
    '''
    Combined global and local contrastive loss as a function of the trunk
    features, through the projection head
    '''
    feature_dim, grid = 4, 2
    head = nn.DenseCLHead(feature_dim, grid=grid, out_dim=8)
    params = {
        k: Tensor(rng.normal(scale=0.5, size=shape))
        for k, shape in head.param_shapes().items()
    }
    n = 2
    keys = nn.l2_normalize(Tensor(rng.normal(size=(n, 8)))).data
    k_cells = nn.l2_normalize(Tensor(rng.normal(size=(n, grid * grid,
                                                      8)))).data
    negatives = nn.l2_normalize(Tensor(rng.normal(size=(5, 8)))).data

    def f(features: Tensor) -> Tensor:
        query = moco.project_global(params, features, head)
        q_cells = densecl.project_dense(params, features, head)
        matched = np.stack([
            k_cells[i][densecl.dense_match(q_cells.data[i], k_cells[i])]
            for i in range(n)
        ])
        cells = grid * grid
        global_term = mixins.contrastive_term(query, keys, negatives, 0.2)
        local_term = mixins.contrastive_term(
            q_cells.reshape(n * cells, 8), matched.reshape(n * cells, 8),
            negatives, 0.2)
        return densecl.densecl_loss(global_term, local_term, 0.7)

    return f, rng.normal(size=(n, feature_dim, 4, 4))


@attr.s(auto_attribs=True, frozen=True)
class ComponentResult(object):
    '''
    Attributes:
        component: Op name or composite loss
        worst: Largest relative error over all checks and trials
        checks: Number of checks run
    '''
    component: str
    worst: float
    checks: int

    def passed(self, threshold: float = THRESHOLD) -> bool:
        return bool(self.worst < threshold)


@attr.s(auto_attribs=True)
class GradcheckReport(object):
    results: List[ComponentResult]
    missing: List[str]
    threshold: float = THRESHOLD

    @property
    def failures(self) -> List[str]:
        failed = [
            r.component for r in self.results if not r.passed(self.threshold)
        ]
        return failed + self.missing

    @property
    def ok(self) -> bool:
        return not self.failures

    def write(self, stream: TextIO) -> None:
        stream.write("component\tworst_rel_error\tstatus\n")
        for r in self.results:
            status = "ok" if r.passed(self.threshold) else "FAIL"
            stream.write(f"{r.component}\t{r.worst:.3e}\t{status}\n")
        for name in self.missing:
            stream.write(f"{name}\tnan\tNO CHECK\n")


def run_gradchecks(components: Optional[Iterable[str]] = None,
                   trials: int = TRIALS,
                   eps: float = EPS,
                   threshold: float = THRESHOLD,
                   seed: int = 0) -> GradcheckReport:
    '''
    Run the registered checks

    Args:
        components: Restrict to these components, all when None
        trials: Random points per check
        eps: Finite-difference step
        threshold: Largest accepted relative error
        seed: Seed of the random points

    Returns:
        Report with one entry per component, plus registered ops that
        have no check
    '''
    checks = view_checks()
    names = sorted(checks) if components is None else list(components)
    missing = []
    if components is None:
        missing = sorted(set(view_ops()) - set(checks))
        for op in missing:
            logger.error(f"Op {op} has no gradient check")

    results = []
    for name in names:
        if name not in checks:
            raise KeyError(f"No gradient check registered for {name}")
        rng = np.random.default_rng([seed, len(name)] +
                                    [ord(c) for c in name])
        worst = 0.0
        try:
            for check in checks[name]:
                for _ in range(trials):
                    f, x = check(rng)
                    worst = max(worst, grad_check(f, Tensor(x), eps))
        except Exception as e:
            logger.error(f"Gradient check of {name} raised {e!r}")
            worst = float("inf")
        result = ComponentResult(name, worst, len(checks[name]))
        if not result.passed(threshold):
            logger.error(f"Gradient check failed for {name}: "
                         f"relative error {worst:.3e}")
        else:
            logger.debug(f"{name}: worst relative error {worst:.3e}")
        results.append(result)
    return GradcheckReport(results, missing, threshold)


def gradcheck_cmd(stream: TextIO = sys.stdout,
                  components: Optional[Iterable[str]] = None,
                  trials: int = TRIALS) -> int:
    '''
    Print the worst relative error per component

    Returns:
        0 when every component passes and every op has a check, else 1
    '''
    report = run_gradchecks(components, trials)
    report.write(stream)
    if not report.ok:
        logger.error(f"Gradient check failures: {report.failures}")
        return 1
    logger.info(f"All {len(report.results)} gradient checks passed")
    return 0
