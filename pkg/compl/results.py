"""
Experiment matrices and their machine-readable result rows
"""

from __future__ import annotations
from typing import IO, Iterable, Iterator, List, Optional, Union

import io
import csv
import json
import logging
from pathlib import Path
from multiprocessing import Pool

import attr
import numpy as np

from .config import ExperimentSpec, TrainConfig
from .trainer import (Datasets, Model, evaluate, make_datasets,
                      run_training)

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()

FORMATS = ("csv", "json")
FIELDS = ("experiment", "mode", "tasks", "aux", "lambda", "fraction", "seed",
          "eval_domain", "metric_name", "metric_value", "iters",
          "wall_seconds")


@attr.s(auto_attribs=True, frozen=True)
class ResultRow(object):
    '''
    One metric of one run on one evaluation domain

    Attributes:
        experiment: Name of the experiment specification
        mode: Training mode
        tasks: Target tasks joined by '+'
        aux: Auxiliary method, none for target-only runs
        lam: Weight of the auxiliary loss
        fraction: Labeled fraction of the training split
        seed: Run seed
        eval_domain: in_domain or shifted
        metric_name: rmse, miou, ods_f, or error for a failed run
        metric_value: Metric, NaN for a failed run
        iters: Iterations of the main phase
        wall_seconds: Training time, None unless timing is requested
    '''
    experiment: str
    mode: str
    tasks: str
    aux: str
    lam: float
    fraction: float
    seed: int
    eval_domain: str
    metric_name: str
    metric_value: float
    iters: int
    wall_seconds: Optional[float] = None

    def to_record(self) -> dict:
        record = attr.asdict(self)
        record["lambda"] = record.pop("lam")
        return {k: record[k] for k in FIELDS}


def _fmt(value: Union[str, int, float, None]) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _json_value(value: Union[str, int, float, None]):
    if isinstance(value, float):
        if not np.isfinite(value):
            return None
        return float(f"{value:.6g}")
    return value


def write_results(rows: Iterable[ResultRow], stream: IO[str],
                  fmt: str = "csv") -> None:
    '''
    Write rows as CSV (fixed header, 6 significant digits) or as a JSON
    array of objects with the same keys
    '''
    if fmt not in FORMATS:
        raise ValueError(f"Unknown result format {fmt}")
    records = [r.to_record() for r in rows]
    if fmt == "csv":
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(FIELDS)
        for record in records:
            writer.writerow([_fmt(record[k]) for k in FIELDS])
    else:
        json.dump([{k: _json_value(v)
                    for k, v in record.items()} for record in records],
                  stream,
                  indent=1)
        stream.write("\n")


def emit_results(rows: Iterable[ResultRow],
                 fmt: str = "csv",
                 path: Optional[Union[str, Path]] = None) -> str:
    '''
    Serialize rows and write them to `path` when given

    Returns:
        The serialized text

    Raises:
        OSError: If `path` cannot be written
    '''
    buffer = io.StringIO()
    write_results(rows, buffer, fmt)
    text = buffer.getvalue()
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            f.write(text)
        logger.info(f"Wrote results to {path}")
    return text


def read_results(stream: IO[str], fmt: str = "csv") -> List[dict]:
    '''Parse emitted results back into records keyed by field'''
    if fmt == "json":
        return json.load(stream)
    return list(csv.DictReader(stream))


@attr.s(auto_attribs=True, frozen=True)
class Cell(object):
    experiment: str
    index: int
    config: TrainConfig
    eval_domains: tuple
    timing: bool = False


def _row(cell: Cell, domain: str, metric_name: str, value: float,
         wall: Optional[float]) -> ResultRow:
    c = cell.config
    return ResultRow(experiment=cell.experiment,
                     mode=c.mode,
                     tasks="+".join(c.target_tasks),
                     aux=c.aux,
                     lam=c.effective_lambda,
                     fraction=c.labeled_fraction,
                     seed=c.seed,
                     eval_domain=domain,
                     metric_name=metric_name,
                     metric_value=float(value),
                     iters=c.max_iters,
                     wall_seconds=wall if cell.timing else None)


def evaluate_rows(cell: Cell, model: Model, data: Datasets,
                  wall_seconds: Optional[float] = None) -> List[ResultRow]:
    '''One row per target task and evaluation domain'''
    rows = []
    for domain in cell.eval_domains:
        dataset = data.val if domain == "in_domain" else data.shifted
        if dataset is None:
            raise ValueError(f"No dataset generated for domain {domain}")
        for task in cell.config.target_tasks:
            metric = evaluate(model, dataset, task, cell.config.num_classes)
            rows.append(
                _row(cell, domain, metric.name, metric.value, wall_seconds))
    return rows


def run_cell(cell: Cell) -> List[ResultRow]:
    '''
    Train one configuration and evaluate every target task on every
    requested domain. A failing run yields a single error row
    '''
    config = cell.config
    logger.info(f"Cell {cell.index}: {config.mode} {config.target_tasks} "
                f"aux={config.aux} lambda={config.effective_lambda} "
                f"fraction={config.labeled_fraction} seed={config.seed}")
    try:
        data = make_datasets(config, shifted="shifted" in cell.eval_domains)
        result = run_training(config, data)
        rows = evaluate_rows(cell, result.model, data, result.wall_seconds)
        logger.info(f"Cell {cell.index} finished in "
                    f"{result.wall_seconds:.1f}s")
        return rows
    except Exception as e:
        logger.warning(f"Cell {cell.index} failed: {type(e).__name__}: {e}")
        return [_row(cell, "in_domain", "error", float("nan"), None)]


def iter_matrix(spec: ExperimentSpec,
                nthreads: int = 1,
                timing: bool = False) -> Iterator[ResultRow]:
    '''
    Run every cell of `spec`, yielding rows cell by cell in cell order
    whatever order parallel workers finish in

    Args:
        spec: Validated experiment specification
        nthreads: Worker processes
        timing: Record wall-clock seconds per run
    '''
    cells = [
        Cell(spec.name, i, config, tuple(spec.eval_domains), timing)
        for i, config in enumerate(spec.cells())
    ]
    logger.info(f"Experiment {spec.name}: {len(cells)} runs")
    if nthreads is None or nthreads <= 1:
        for cell in cells:
            yield from run_cell(cell)
        return
    with Pool(processes=nthreads) as pool:
        for rows in pool.imap(run_cell, cells):
            yield from rows


def run_matrix(spec: ExperimentSpec,
               nthreads: int = 1,
               timing: bool = False) -> List[ResultRow]:
    return list(iter_matrix(spec, nthreads, timing))
