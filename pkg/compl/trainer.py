"""
Joint optimization of target tasks and a self-supervised auxiliary task

A run is a sequence of phases. Each phase draws independent target and
auxiliary batches, minimizes L_target + lambda * L_aux with SGD under a
poly schedule and evaluates the target heads at a fixed cadence.
"""

from __future__ import annotations
from typing import IO, Mapping, Optional, Sequence, Union

import csv
import json
import time
import logging
from pathlib import Path
from dataclasses import dataclass, field, asdict

import attr
import numpy as np

from . import autodiff
from .autodiff import Tape, Tensor, DomainError, backward
from .nn import (ConstView, HeadSet, ModelParams, ParamView, TrunkModel,
                 init_params)
from .tasks import MetricAccumulator, MetricValue, head_channels, target_loss
from .synthetic import (DomainParams, SplitSpec, SyntheticDataset,
                        make_dataset, make_splits)
from .augment import target_augment
from .optim import OptimizerState, poly_lr, sgd_step
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, make_train_config
from .method_factory import get_method
from .auxiliary.mixins import AuxBatch, AuxiliaryMethod, AuxSettings

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()

EVAL_BATCH = 16


class DivergenceError(RuntimeError):
    """Raised when a loss becomes NaN or infinite"""
    pass


class MissingHeadError(KeyError):
    """Raised when evaluating a task the model has no head for"""
    pass


@attr.s(auto_attribs=True)
class Model(object):
    '''
    Trunk, heads and their parameters

    Attributes:
        trunk: Shared encoder-decoder
        heads: Target heads and optional auxiliary head
        params: Parameters of all of the above
    '''
    trunk: TrunkModel
    heads: HeadSet
    params: ModelParams

    def predict(self, task: str, images: np.ndarray) -> np.ndarray:
        '''
        Target head output [N, ch, H, W] without recording a tape

        Raises:
            MissingHeadError: If the model has no head for `task`
        '''
        if task not in self.heads.tasks:
            logger.error(f"No head for task {task}")
            raise MissingHeadError(task)
        view = ConstView(self.params)
        features = self.trunk(view, Tensor(images))
        return self.heads.predict(view, task, features).data

    def without_aux(self) -> Model:
        '''Copy with the auxiliary head and its parameters removed'''
        return Model(
            self.trunk, attr.evolve(self.heads, aux_head=None),
            ModelParams({
                k: v
                for k, v in self.params.items() if not k.startswith("aux.")
            }))


def build_model(config: TrainConfig) -> tuple[Model, Optional[AuxiliaryMethod]]:
    '''
    Initialize the trunk, one head per target task and, when the run uses
    one, the auxiliary method and its head

    Parameter initialization is keyed by name, so trunk and target heads
    are identical with and without an auxiliary head.
    '''
    trunk = TrunkModel()
    method = None
    if config.uses_aux:
        settings = AuxSettings(feature_dim=trunk.feature_dim,
                               capacity=aux_pool_size(config),
                               tau=config.tau,
                               momentum=config.moco_m,
                               grid=config.grid,
                               w_local=config.w_local,
                               geom=config.geometry)
        method = get_method(config.aux, settings)
    heads = HeadSet(trunk.feature_dim,
                    tuple((t, head_channels(t, config.num_classes))
                          for t in config.target_tasks),
                    aux_head=method.head if method else None)
    params = init_params(trunk, heads, config.seed)
    if method is not None:
        method.setup(params)
    return Model(trunk, heads, params), method


def aux_pool_size(config: TrainConfig) -> int:
    if config.aux_split == "same":
        return len(make_splits(config.train_size,
                               SplitSpec(config.labeled_fraction,
                                         config.seed)))
    return config.train_size


@dataclass
class Datasets:
    '''
    Attributes:
        train: Training images and labels
        val: Held-out split of the training domain
        labeled: Indices of `train` whose labels may be used
        shifted: Split of the other domain for zero-shot evaluation
    '''
    train: SyntheticDataset
    val: SyntheticDataset
    labeled: np.ndarray
    shifted: Optional[SyntheticDataset] = None


def make_datasets(config: TrainConfig, shifted: bool = False) -> Datasets:
    '''
    Generate the splits of a run. Train, validation and shifted splits use
    distinct seed entropy derived from the run seed
    '''
    params = DomainParams.for_domain(config.domain, config.image_size,
                                     config.num_classes)
    train = make_dataset(config.train_size, params, (config.seed, 0))
    val = make_dataset(config.val_size, params, (config.seed, 1))
    other = None
    if shifted:
        other_domain = "B" if config.domain == "A" else "A"
        other = make_dataset(
            config.val_size,
            DomainParams.for_domain(other_domain, config.image_size,
                                    config.num_classes), (config.seed, 2))
    labeled = make_splits(config.train_size,
                          SplitSpec(config.labeled_fraction, config.seed))
    return Datasets(train, val, labeled, other)


class Sampler(object):
    '''
    Draws indices epoch by epoch: each epoch is a fresh permutation of the
    pool, so within an epoch no index repeats
    '''
    def __init__(self, pool: np.ndarray, rng: np.random.Generator) -> None:
        if len(pool) == 0:
            raise ValueError("Cannot sample from an empty split")
        self.pool = np.asarray(pool, dtype=np.int64)
        self.rng = rng
        self.perm = np.empty(0, dtype=np.int64)
        self.pos = 0
        self.epoch = 0

    def draw(self, n: int) -> np.ndarray:
        out = []
        while len(out) < n:
            if self.pos >= len(self.perm):
                self.perm = self.rng.permutation(self.pool)
                self.pos = 0
                self.epoch += 1
            take = min(n - len(out), len(self.perm) - self.pos)
            out.extend(self.perm[self.pos:self.pos + take])
            self.pos += take
        return np.asarray(out, dtype=np.int64)

    def state_dict(self) -> dict:
        return {
            "perm": [int(i) for i in self.perm],
            "pos": self.pos,
            "epoch": self.epoch,
            "rng": self.rng.bit_generator.state
        }

    def load_state_dict(self, state: Mapping) -> None:
        self.perm = np.asarray(state["perm"], dtype=np.int64)
        self.pos = int(state["pos"])
        self.epoch = int(state["epoch"])
        self.rng.bit_generator.state = state["rng"]


class Streams(object):
    '''
    Independent random streams spawned from the run seed: target sampling,
    auxiliary sampling, target augmentation and auxiliary augmentation.
    Enabling the auxiliary task leaves the target streams untouched
    '''
    def __init__(self, seed: int, labeled: np.ndarray,
                 aux_pool: np.ndarray) -> None:
        children = np.random.SeedSequence(seed).spawn(4)
        gens = [np.random.default_rng(c) for c in children]
        self.target = Sampler(labeled, gens[0])
        self.aux = Sampler(aux_pool, gens[1])
        self.target_aug = gens[2]
        self.aux_aug = gens[3]

    def state_dict(self) -> dict:
        return {
            "target": self.target.state_dict(),
            "aux": self.aux.state_dict(),
            "target_aug": self.target_aug.bit_generator.state,
            "aux_aug": self.aux_aug.bit_generator.state
        }

    def load_state_dict(self, state: Mapping) -> None:
        self.target.load_state_dict(state["target"])
        self.aux.load_state_dict(state["aux"])
        self.target_aug.bit_generator.state = state["target_aug"]
        self.aux_aug.bit_generator.state = state["aux_aug"]


@dataclass
class TargetBatch:
    images: np.ndarray
    labels: dict[str, np.ndarray]
    ids: np.ndarray


def build_target_batch(dataset: SyntheticDataset, tasks: Sequence[str],
                       ids: np.ndarray,
                       rng: np.random.Generator) -> TargetBatch:
    samples = [target_augment(dataset[i], rng) for i in ids]
    labels = {}
    for task in tasks:
        if task == "depth":
            labels[task] = np.stack([s.depth for s in samples])
        elif task == "semseg":
            labels[task] = np.stack([s.seg for s in samples])
        else:
            labels[task] = np.stack([s.boundary for s in samples])
    return TargetBatch(np.stack([s.image for s in samples]), labels, ids)


def build_joint_batch(
    dataset: SyntheticDataset,
    streams: Streams,
    sizes: tuple[int, int],
    tasks: Sequence[str],
    method: Optional[AuxiliaryMethod] = None
) -> tuple[Optional[TargetBatch], Optional[AuxBatch]]:
    '''
    Independent target and auxiliary batches

    The target batch comes from the labeled subset with target
    augmentation, the auxiliary batch from the auxiliary pool prepared by
    the method. A zero size or missing method skips that batch without
    touching its streams.

    Args:
        dataset: Training split
        streams: Random streams of the run
        sizes: (target batch size, auxiliary batch size)
        tasks: Target tasks whose labels are collected
        method: Auxiliary method preparing the auxiliary batch

    Returns:
        (target batch or None, auxiliary batch or None)
    '''
    n_target, n_aux = sizes
    target = aux = None
    if n_target > 0:
        ids = streams.target.draw(n_target)
        target = build_target_batch(dataset, tasks, ids, streams.target_aug)
    if n_aux > 0 and method is not None:
        ids = streams.aux.draw(n_aux)
        aux = method.prepare_batch(dataset.images[ids], ids, streams.aux_aug)
    return target, aux


@dataclass
class HistoryRow:
    phase: str
    iter: int
    lr: float
    lam: float
    loss_target: float
    loss_aux: float
    loss_total: float


@dataclass
class EvalRecord:
    phase: str
    iter: int
    task: str
    metric: str
    value: float


@dataclass
class TrainHistory:
    rows: list[HistoryRow] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)

    def loss_residuals(self) -> np.ndarray:
        '''|loss_total - (loss_target + lambda * loss_aux)| per row'''
        return np.array([
            abs(r.loss_total - (r.loss_target + r.lam * r.loss_aux))
            for r in self.rows
        ])

    def write_csv(self, stream: IO[str]) -> None:
        '''
        Write step rows then evaluation records; floats use 17 significant
        digits so identical runs give identical bytes
        '''
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["kind", "phase", "iter", "lr", "lambda",
                         "loss_target", "loss_aux", "loss_total", "task",
                         "metric", "value"])
        for r in self.rows:
            writer.writerow([
                "step", r.phase, r.iter, f"{r.lr:.17g}", f"{r.lam:.17g}",
                f"{r.loss_target:.17g}", f"{r.loss_aux:.17g}",
                f"{r.loss_total:.17g}", "", "", ""
            ])
        for e in self.evals:
            writer.writerow([
                "eval", e.phase, e.iter, "", "", "", "", "", e.task, e.metric,
                f"{e.value:.17g}"
            ])


@attr.s(auto_attribs=True, frozen=True)
class Phase(object):
    '''
    Attributes:
        name: pretrain, target or joint
        iters: Number of steps
        target: Whether target losses are trained
        aux: Whether the auxiliary loss is trained
    '''
    name: str
    iters: int
    target: bool
    aux: bool


def plan_phases(config: TrainConfig) -> list[Phase]:
    '''
    Pretraining phases run as long as the main phase
    '''
    n = config.max_iters
    if not config.uses_aux:
        return [Phase("target", n, True, False)]
    if config.mode == "pretrain_finetune":
        return [Phase("pretrain", n, False, True), Phase("finetune", n, True,
                                                         False)]
    if config.mode == "pretrain_joint":
        return [Phase("pretrain", n, False, True), Phase("joint", n, True,
                                                         True)]
    return [Phase("joint", n, True, True)]


def train_step(model: Model,
               batches: tuple[Optional[TargetBatch], Optional[AuxBatch]],
               config: TrainConfig,
               state: OptimizerState,
               lr: float,
               lam: float,
               method: Optional[AuxiliaryMethod] = None,
               phase: str = "target") -> HistoryRow:
    '''
    One optimizer step on L_target + lambda * L_aux

    Target losses of several tasks are summed without weights. The step
    runs one backward pass, one SGD update and then, for contrastive
    methods, the momentum update and queue push.

    Args:
        model: Model updated in place
        batches: Target and auxiliary batches; a missing batch contributes
            a zero term
        config: Run configuration
        state: Optimizer state
        lr: Learning rate of this step
        lam: Auxiliary weight
        method: Auxiliary method of the auxiliary batch
        phase: Phase name recorded in the history row

    Raises:
        DivergenceError: If a loss is NaN or infinite
    '''
    target_batch, aux_batch = batches
    tape = Tape()
    view = ParamView(model.params, tape)
    loss_target = loss_aux = total = None
    try:
        if target_batch is not None:
            features = model.trunk(view, Tensor(target_batch.images))
            for task in model.heads.tasks:
                term = target_loss(task,
                                   model.heads.predict(view, task, features),
                                   target_batch.labels[task])
                loss_target = term if loss_target is None else loss_target + term
            total = loss_target
        if aux_batch is not None:
            loss_aux = method.loss(view, model.trunk, aux_batch)
            weighted = loss_aux * lam
            total = weighted if total is None else total + weighted
    except DomainError as e:
        _diverged(state.iteration, phase, loss_target, loss_aux, e)

    values = [t.item() if t is not None else 0.0
              for t in (loss_target, loss_aux, total)]
    if not np.all(np.isfinite(values)):
        _diverged(state.iteration, phase, loss_target, loss_aux)

    touched = set(tape.leaves)
    try:
        grads = backward(total)
    except DomainError as e:
        _diverged(state.iteration, phase, loss_target, loss_aux, e)
    sgd_step(model.params,
             grads,
             state,
             lr,
             momentum=config.momentum,
             weight_decay=config.weight_decay,
             touched=touched)
    if aux_batch is not None:
        method.after_step(model.params)

    row = HistoryRow(phase, state.iteration - 1, lr, lam, *values)
    logger.debug(f"{phase} step {row.iter}: target {values[0]:.6g} "
                 f"aux {values[1]:.6g} total {values[2]:.6g}")
    return row


def _diverged(iteration: int,
              phase: str,
              loss_target: Optional[Tensor],
              loss_aux: Optional[Tensor],
              cause: Optional[Exception] = None) -> None:
    terms = {
        "target": loss_target.item() if loss_target is not None else None,
        "aux": loss_aux.item() if loss_aux is not None else None
    }
    message = (f"Loss diverged at iteration {iteration} of phase {phase}; "
               f"terms {terms}")
    if cause is not None:
        message += f"; {cause}"
    logger.error(message)
    raise DivergenceError(message) from cause


def evaluate(model: Model,
             dataset: SyntheticDataset,
             task: str,
             num_classes: Optional[int] = None) -> MetricValue:
    '''
    Metric of a target head on un-augmented images; the auxiliary head is
    never used

    Raises:
        MissingHeadError: If the model has no head for `task`
    '''
    if task not in model.heads.tasks:
        logger.error(f"No head for task {task}")
        raise MissingHeadError(task)
    if num_classes is None:
        num_classes = dict(model.heads.target_channels).get("semseg", 2)
    acc = MetricAccumulator(task, num_classes)
    indices = np.arange(len(dataset))
    for start in range(0, len(dataset), EVAL_BATCH):
        ids = indices[start:start + EVAL_BATCH]
        acc.update(model.predict(task, dataset.images[ids]),
                   dataset.labels(task, ids))
    return acc.result()


class Trainer(object):
    '''
    Stateful runner of the phases of one configuration, resumable from a
    checkpoint taken between steps

    Attributes:
        config: Run configuration
        data: Splits of the run
        model: Model being trained
        method: Auxiliary method, None for target-only runs
        history: Step and evaluation records
    '''
    def __init__(self, config: TrainConfig,
                 data: Optional[Datasets] = None) -> None:
        autodiff.CHECK_FINITE = config.check_finite
        self.config = config
        self.data = data if data is not None else make_datasets(config)
        self.model, self.method = build_model(config)
        aux_pool = (self.data.labeled if config.aux_split == "same" else
                    np.arange(len(self.data.train)))
        self.streams = Streams(config.seed, self.data.labeled, aux_pool)
        self.phases = plan_phases(config)
        self.phase_index = 0
        self.iteration = 0
        self.optimizer = OptimizerState(self.model.params)
        self.history = TrainHistory()
        self.wall_seconds = 0.0

    @property
    def done(self) -> bool:
        return self.phase_index >= len(self.phases)

    def step(self) -> HistoryRow:
        '''Run the next step of the current phase'''
        phase = self.phases[self.phase_index]
        if self.iteration == 0:
            logger.info(f"Starting phase {phase.name} "
                        f"({phase.iters} iterations)")

        sizes = (self.config.batch_target if phase.target else 0,
                 self.config.batch_aux if phase.aux else 0)
        batches = build_joint_batch(self.data.train, self.streams, sizes,
                                    self.model.heads.tasks, self.method)
        # Pretraining reports the auxiliary loss alone
        lam = ((self.config.lam if phase.target else 1.0)
               if phase.aux else 0.0)
        lr = poly_lr(self.iteration, phase.iters, self.config.base_lr,
                     self.config.poly_power)
        row = train_step(self.model, batches, self.config, self.optimizer, lr,
                         lam, self.method, phase.name)
        row.iter = self.iteration
        self.history.rows.append(row)
        self.iteration += 1

        if phase.target and self.iteration % self.config.eval_every == 0:
            self._evaluate(phase)
        if self.iteration == phase.iters:
            logger.info(f"Finished phase {phase.name}")
            self.phase_index += 1
            self.iteration = 0
            self.optimizer = OptimizerState(self.model.params)
        return row

    def _evaluate(self, phase: Phase) -> None:
        for task in self.model.heads.tasks:
            metric = evaluate(self.model, self.data.val, task,
                              self.config.num_classes)
            self.history.evals.append(
                EvalRecord(phase.name, self.iteration, task, metric.name,
                           metric.value))
            logger.info(f"{phase.name} iter {self.iteration}: val "
                        f"{metric.name}({task}) = {metric.value:.6g}")

    def run(self, steps: Optional[int] = None) -> Trainer:
        '''
        Run `steps` more steps, or to completion when None
        '''
        start = time.perf_counter()
        taken = 0
        while not self.done and (steps is None or taken < steps):
            self.step()
            taken += 1
        self.wall_seconds += time.perf_counter() - start
        if self.done:
            logger.info(f"Training finished in {self.wall_seconds:.1f}s")
        return self

    def save(self, path: Union[str, Path]) -> Path:
        state = self.optimizer.state_dict()
        if self.method is not None:
            state.update(self.method.state_dict())
        meta = {
            "config": self.config.to_dict(),
            "phase_index": self.phase_index,
            "iteration": self.iteration,
            "streams": self.streams.state_dict()
        }
        return save_checkpoint(path, self.model.params, state, meta)

    @classmethod
    def restore(cls,
                path: Union[str, Path],
                data: Optional[Datasets] = None) -> Trainer:
        '''
        Rebuild a trainer from a checkpoint written by `save`

        Raises:
            CheckpointError: If the checkpoint does not match the
                architecture its configuration describes
        '''
        checkpoint = load_checkpoint(path)
        config = make_train_config(checkpoint.meta["config"])
        trainer = cls(config, data)
        trainer.load(checkpoint)
        return trainer

    def load(self, checkpoint: Checkpoint) -> None:
        checkpoint.check_shapes(self.model.params.shapes())
        for k, v in checkpoint.params.items():
            self.model.params[k] = v
        self.optimizer.load_state_dict(checkpoint.state)
        if self.method is not None:
            self.method.load_state_dict(checkpoint.state)
        self.phase_index = int(checkpoint.meta.get("phase_index", 0))
        self.iteration = int(checkpoint.meta.get("iteration", 0))
        if "streams" in checkpoint.meta:
            self.streams.load_state_dict(checkpoint.meta["streams"])


@dataclass
class TrainResult:
    model: Model
    history: TrainHistory
    method: Optional[AuxiliaryMethod]
    wall_seconds: float


def run_training(config: TrainConfig,
                 data: Optional[Datasets] = None) -> TrainResult:
    '''
    Execute every phase of `config`; deterministic given its seed

    Args:
        config: Run configuration
        data: Pre-built splits, generated from the config when None

    Returns:
        Final model, its history and the auxiliary method state
    '''
    trainer = Trainer(config, data).run()
    return TrainResult(trainer.model, trainer.history, trainer.method,
                       trainer.wall_seconds)


def history_to_json(history: TrainHistory) -> str:
    return json.dumps({
        "rows": [asdict(r) for r in history.rows],
        "evals": [asdict(e) for e in history.evals]
    })
