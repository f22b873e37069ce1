"""
Contains classes/methods that validate experiment specifications and
expand them into fully seeded training configurations
"""

from __future__ import annotations
from typing import Any, Mapping, Optional, Sequence, Union

import os
import re
import itertools

import logging
from pathlib import Path

import attr
import yaml
try:
    from yaml import CLoader as Loader
except ImportError:
    from yaml import Loader

from .augment import CropGeometry

# Initialize module logger
logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()

MODES = ("baseline", "joint", "pretrain_finetune", "pretrain_joint",
         "multitask", "multitask_joint")
TARGET_ONLY_MODES = ("baseline", "multitask")
PRETRAIN_MODES = ("pretrain_finetune", "pretrain_joint")
TASKS = ("depth", "semseg", "boundary")
AUX_METHODS = ("none", "rot", "moco", "densecl")
EVAL_DOMAINS = ("in_domain", "shifted")

LAMBDA_DEFAULTS = {"none": 0.0, "rot": 0.05, "moco": 0.2, "densecl": 0.2}
LAMBDA_GRID = (0.05, 0.1, 0.2, 0.5, 1.0)

SEED_ENV = "COMPL_SEED"

# Alternative spellings accepted in files and on the command line
_ALIASES = {
    "lambda": "lam",
    "lr": "base_lr",
    "task": "target_tasks",
    "tasks": "target_tasks",
    "fraction": "labeled_fraction",
    "m": "moco_m",
}


class ValidationError(ValueError):
    """Raised when a configuration is incorrectly specified"""
    def __init__(self, message: str, field: Optional[str] = None) -> None:
        super().__init__(message)
        self.field = field


def _fail(field: str, message: str) -> None:
    logger.error(f"Invalid value for {field}: {message}")
    raise ValidationError(f"{field}: {message}", field)


def _to_bool(value: Union[str, bool, int]) -> bool:
    if isinstance(value, str):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"Cannot interpret {value} as a boolean")
    return bool(value)


def _to_tasks(value: Union[str, Sequence[str]]) -> tuple:
    if isinstance(value, str):
        value = [v.strip() for v in value.split(",") if v.strip()]
    return tuple(dict.fromkeys(value))


def _one_of(choices: Sequence[str]):
    def check(instance, attribute, value):
        if value not in choices:
            _fail(attribute.name, f"{value!r} is not one of {choices}")

    return check


def _positive(instance, attribute, value):
    if value is not None and not value > 0:
        _fail(attribute.name, f"must be positive, got {value}")


def _non_negative(instance, attribute, value):
    if not value >= 0:
        _fail(attribute.name, f"must be non-negative, got {value}")


def _unit_interval(lower_open: bool, upper_open: bool):
    def check(instance, attribute, value):
        low_ok = value > 0 if lower_open else value >= 0
        high_ok = value < 1 if upper_open else value <= 1
        if not (low_ok and high_ok):
            _fail(attribute.name, f"{value} outside its unit interval")

    return check


def _check_tasks(instance, attribute, value):
    if not value:
        _fail(attribute.name, "at least one target task is required")
    unknown = [t for t in value if t not in TASKS]
    if unknown:
        _fail(attribute.name, f"unknown tasks {unknown}")


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV, 1))


@attr.s(frozen=True, kw_only=True)
class TrainConfig(object):
    '''
    Fully specified training run

    Fields left unset are resolved from the others: `lam` from the
    auxiliary method, `crop_offset` from the target tasks, `eval_every`
    from `max_iters`, `batch_aux` from `batch_target` and `seed` from
    COMPL_SEED.
    '''
    mode: str = attr.ib(default="baseline", validator=_one_of(MODES))
    target_tasks: tuple = attr.ib(default=("depth", ),
                                  converter=_to_tasks,
                                  validator=_check_tasks)
    aux: str = attr.ib(default="none", validator=_one_of(AUX_METHODS))
    lam: float = attr.ib(default=attr.Factory(
        lambda self: LAMBDA_DEFAULTS[self.aux], takes_self=True),
                         converter=float,
                         validator=_non_negative)
    base_lr: float = attr.ib(default=0.01,
                             converter=float,
                             validator=_positive)
    momentum: float = attr.ib(default=0.9,
                              converter=float,
                              validator=_unit_interval(False, True))
    weight_decay: float = attr.ib(default=1e-4,
                                  converter=float,
                                  validator=_non_negative)
    poly_power: float = attr.ib(default=0.9,
                                converter=float,
                                validator=_non_negative)
    max_iters: int = attr.ib(default=500, converter=int, validator=_positive)
    batch_target: int = attr.ib(default=4, converter=int, validator=_positive)
    batch_aux: int = attr.ib(default=attr.Factory(
        lambda self: self.batch_target, takes_self=True),
                             converter=int,
                             validator=_positive)
    labeled_fraction: float = attr.ib(default=1.0,
                                      converter=float,
                                      validator=_unit_interval(True, False))
    seed: int = attr.ib(factory=_default_seed,
                        converter=int,
                        validator=_non_negative)
    tau: float = attr.ib(default=0.2, converter=float, validator=_positive)
    moco_m: float = attr.ib(default=0.999,
                            converter=float,
                            validator=_unit_interval(False, True))
    w_local: float = attr.ib(default=0.7,
                             converter=float,
                             validator=_unit_interval(False, False))
    grid: int = attr.ib(default=4, converter=int, validator=_positive)
    image_size: int = attr.ib(default=32, converter=int, validator=_positive)
    crop_size: int = attr.ib(default=24, converter=int, validator=_positive)
    crop_offset: int = attr.ib(default=attr.Factory(
        lambda self: 2 if self.target_tasks == ("depth", ) else 4,
        takes_self=True),
                               converter=int,
                               validator=_non_negative)
    train_size: int = attr.ib(default=64, converter=int, validator=_positive)
    val_size: int = attr.ib(default=32, converter=int, validator=_positive)
    num_classes: int = attr.ib(default=4, converter=int)
    aux_split: str = attr.ib(default="full",
                             validator=_one_of(("full", "same")))
    domain: str = attr.ib(default="A", validator=_one_of(("A", "B")))
    eval_every: int = attr.ib(default=attr.Factory(
        lambda self: max(1, self.max_iters // 10), takes_self=True),
                              converter=int,
                              validator=_positive)
    check_finite: bool = attr.ib(default=True, converter=_to_bool)

    @num_classes.validator
    def _check_classes(self, attribute, value):
        if value < 2:
            _fail(attribute.name, "background and one object class needed")

    def __attrs_post_init__(self):
        if self.batch_aux != self.batch_target:
            _fail("batch_aux", "must equal batch_target")
        if self.mode in TARGET_ONLY_MODES and self.aux != "none":
            _fail("aux", f"mode {self.mode} trains no auxiliary task")
        if self.mode in PRETRAIN_MODES and self.aux == "none":
            _fail("aux", f"mode {self.mode} requires an auxiliary task")
        if self.mode.startswith("multitask") and len(self.target_tasks) < 2:
            _fail("target_tasks", f"mode {self.mode} requires two or more "
                  "target tasks")
        if not self.geometry.fits(self.image_size, self.image_size):
            _fail("crop_size", f"crop {self.crop_size} + offset "
                  f"{self.crop_offset} exceeds image {self.image_size}")
        if self.grid > self.crop_size:
            _fail("grid", f"grid {self.grid} exceeds crop {self.crop_size}")

    @property
    def geometry(self) -> CropGeometry:
        return CropGeometry(self.crop_size, self.crop_size, self.crop_offset)

    @property
    def uses_aux(self) -> bool:
        return self.aux != "none" and self.mode not in TARGET_ONLY_MODES

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.uses_aux else 0.0

    def to_dict(self) -> dict:
        d = attr.asdict(self)
        d["target_tasks"] = list(self.target_tasks)
        return d


def _canonical_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    return _ALIASES.get(key, key)


def make_train_config(values: Mapping[str, Any]) -> TrainConfig:
    '''
    Build a validated TrainConfig from loosely typed values

    Raises:
        ValidationError: Naming the offending field
    '''
    kwargs = canonical_train_values(values)
    try:
        return TrainConfig(**kwargs)
    except ValidationError:
        raise
    except (TypeError, ValueError) as e:
        name = _unconvertible_field(kwargs)
        logger.error(f"Invalid value for {name}: {e}")
        raise ValidationError(f"{name}: {e}", name) from e


def canonical_train_values(values: Mapping[str, Any]) -> dict:
    '''
    Map aliases onto TrainConfig field names

    Raises:
        ValidationError: On keys that are not training fields
    '''
    fields = {a.name for a in attr.fields(TrainConfig)}
    kwargs = {}
    for key, value in values.items():
        name = _canonical_key(key)
        if name not in fields:
            _fail(key, "unknown training field")
        kwargs[name] = value
    return kwargs


def _unconvertible_field(kwargs: Mapping[str, Any]) -> str:
    for a in attr.fields(TrainConfig):
        if a.name in kwargs and a.converter is not None:
            try:
                a.converter(kwargs[a.name])
            except (TypeError, ValueError):
                return a.name
    return "train"


@attr.s(auto_attribs=True, frozen=True)
class SweepAxes(object):
    '''
    Axes of an experiment matrix; an empty axis keeps the base value
    '''
    labeled_fractions: tuple = ()
    aux: tuple = ()
    modes: tuple = ()
    lambdas: tuple = ()
    seeds: tuple = ()
    target_tasks: tuple = ()


@attr.s(auto_attribs=True, frozen=True)
class ExperimentSpec(object):
    '''
    Attributes:
        name: Experiment name written to every result row
        train_values: Explicitly given training fields; the rest are
            resolved per cell
        sweep: Matrix axes
        eval_domains: Subset of in_domain, shifted
        env: Resolved environment variables of the spec
    '''
    name: str
    train_values: dict = attr.Factory(dict)
    sweep: SweepAxes = SweepAxes()
    eval_domains: tuple = ("in_domain", )
    env: dict = attr.Factory(dict)

    @property
    def train(self) -> TrainConfig:
        '''
        Configuration of the first cell; the base itself when nothing is
        swept
        '''
        return self.cells()[0]

    def cells(self) -> list[TrainConfig]:
        '''
        Cartesian product of the sweep axes in a fixed order. Cells that
        resolve to the same configuration are run once: a swept target-only
        mode drops the auxiliary method and runs without one drop lambda.
        Only the expanded cells are validated, so the base may combine
        values that no cell uses together
        '''
        base = dict(self.train_values)
        axes = [
            ("labeled_fraction", self.sweep.labeled_fractions),
            ("target_tasks", self.sweep.target_tasks),
            ("mode", self.sweep.modes),
            ("aux", self.sweep.aux),
            ("lam", self.sweep.lambdas),
            ("seed", self.sweep.seeds),
        ]
        names = [n for n, v in axes]
        values = [v if v else (None, ) for _, v in axes]

        cells, seen = [], set()
        for combo in itertools.product(*values):
            changes = {
                n: v
                for n, v in zip(names, combo) if v is not None
            }
            merged = {**base, **changes}
            swept = "mode" in changes or "aux" in changes
            if swept and merged.get("mode",
                                    "baseline") in TARGET_ONLY_MODES:
                merged["aux"] = "none"
            if merged.get("aux", "none") == "none":
                merged.pop("lam", None)
                if merged.get("mode") == "joint":
                    merged["mode"] = "baseline"
                elif merged.get("mode") == "multitask_joint":
                    merged["mode"] = "multitask"
            config = make_train_config(merged)
            key = repr(sorted(config.to_dict().items()))
            if key in seen:
                continue
            seen.add(key)
            cells.append(config)
        return cells


def _substitute_env(value: str) -> str:
    '''
    Resolve environment variables in a string

    Raises:
        ValidationError: If an environment variable cannot be resolved
    '''
    r = os.path.expandvars(value)
    unresolved = re.findall("\\$[A-Za-z0-9_]+", r)

    if unresolved:
        [
            logger.error(f"Undefined environment variable {u}!")
            for u in unresolved
        ]
        raise ValidationError(f"Undefined environment variables "
                              f"{unresolved}", "env")
    return r


def _resolve(value: Any) -> Any:
    if isinstance(value, str):
        return _substitute_env(value)
    if isinstance(value, list):
        return [_resolve(v) for v in value]
    return value


def _as_list(field: str, value: Any) -> list:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return list(value)
    _fail(field, f"expected a list, got {value!r}")


def _parse_sweep(raw: Mapping[str, Any]) -> SweepAxes:
    keys = {
        "labeled_fractions": "labeled_fractions",
        "fractions": "labeled_fractions",
        "aux": "aux",
        "modes": "modes",
        "lambdas": "lambdas",
        "seeds": "seeds",
        "target_tasks": "target_tasks",
        "tasks": "target_tasks",
    }
    axes: dict[str, tuple] = {}
    for key, value in raw.items():
        if key not in keys:
            _fail(f"sweep.{key}", "unknown sweep axis")
        name = keys[key]
        if name == "lambdas" and value == "grid":
            axes[name] = LAMBDA_GRID
            continue
        items = _as_list(f"sweep.{key}", _resolve(value))
        try:
            if name == "target_tasks":
                items = [_to_tasks(v) for v in items]
            elif name in ("labeled_fractions", "lambdas"):
                items = [float(v) for v in items]
            elif name == "seeds":
                items = [int(v) for v in items]
        except (TypeError, ValueError) as e:
            _fail(f"sweep.{key}", str(e))
        axes[name] = tuple(dict.fromkeys(items))
    return SweepAxes(**axes)


_SPEC_KEYS = ("name", "train", "sweep", "eval_domains", "env")


def load_spec_file(path: Union[str, Path]) -> dict:
    '''
    Read a YAML (or JSON) experiment file

    Raises:
        ValidationError: If the file is not a mapping
    '''
    with open(path, 'r') as ystream:
        try:
            raw = yaml.load(ystream, Loader=Loader)
        except yaml.YAMLError as e:
            logger.error(f"Cannot parse {path}")
            raise ValidationError(f"Cannot parse {path}: {e}") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        _fail(str(path), "top level must be a mapping")
    return raw


def parse_config(path: Optional[Union[str, Path]] = None,
                 overrides: Optional[Mapping[str, Any]] = None,
                 name: Optional[str] = None) -> ExperimentSpec:
    '''
    Build a validated experiment specification

    Precedence is built-in defaults < file < overrides.

    Args:
        path: YAML or JSON experiment file
        overrides: TrainConfig fields from the command line
        name: Experiment name overriding the file's

    Returns:
        Spec with every default resolved

    Raises:
        ValidationError: Unknown keys, invalid values or unresolved
            environment variables
    '''
    raw = load_spec_file(path) if path is not None else {}
    unknown = [k for k in raw if k not in _SPEC_KEYS]
    if unknown:
        _fail(unknown[0], "unknown top-level key")

    env = {
        k: _substitute_env(str(v))
        for k, v in (raw.get("env") or {}).items()
    }
    train = {k: _resolve(v) for k, v in (raw.get("train") or {}).items()}
    train.update(overrides or {})

    eval_domains = tuple(
        _as_list("eval_domains", raw.get("eval_domains", ["in_domain"])))
    for d in eval_domains:
        if d not in EVAL_DOMAINS:
            _fail("eval_domains", f"{d!r} is not one of {EVAL_DOMAINS}")

    train = canonical_train_values(train)
    spec = ExperimentSpec(name=name or str(raw.get("name", "experiment")),
                          train_values=train,
                          sweep=_parse_sweep(raw.get("sweep") or {}),
                          eval_domains=eval_domains,
                          env=env)
    cells = spec.cells()
    logger.debug(f"Parsed experiment {spec.name} with {len(cells)} cells")
    return spec
