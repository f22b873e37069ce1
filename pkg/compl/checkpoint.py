"""
Checkpoints as uncompressed .npz archives holding parameters, optimizer
buffers, auxiliary method state (momentum encoder and queues) and a JSON
metadata record with the RNG and sampler state
"""

from __future__ import annotations
from typing import Any, Mapping, Optional, Union

import json
import logging
import zipfile
from pathlib import Path
from dataclasses import dataclass, field

import numpy as np

from .nn import ModelParams

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()

_PARAM = "param."
_STATE = "state."
_META = "meta"


class CheckpointError(ValueError):
    """Raised for malformed checkpoints or mismatched architectures"""
    pass


@dataclass
class Checkpoint:
    '''
    Attributes:
        params: Model parameters
        state: Optimizer and auxiliary method arrays by key
        meta: JSON-serializable run metadata
    '''
    params: ModelParams
    state: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def check_shapes(self, expected: Mapping[str, tuple]) -> None:
        '''
        Raises:
            CheckpointError: If names or shapes differ from `expected`
        '''
        names = set(self.params)
        if names != set(expected):
            diff = sorted(names.symmetric_difference(expected))
            logger.error(f"Checkpoint parameters differ: {diff}")
            raise CheckpointError(f"Parameter names differ: {diff[:5]}")
        for k, shape in expected.items():
            if self.params[k].shape != tuple(shape):
                logger.error(f"Checkpoint shape mismatch on {k}")
                raise CheckpointError(f"{k} has shape "
                                      f"{self.params[k].shape}, expected "
                                      f"{tuple(shape)}")


def save_checkpoint(path: Union[str, Path],
                    params: Mapping[str, np.ndarray],
                    state: Optional[Mapping[str, np.ndarray]] = None,
                    meta: Optional[Mapping[str, Any]] = None) -> Path:
    '''
    Write a checkpoint, creating parent directories

    Args:
        path: Output .npz file
        params: Model parameters
        state: Optimizer/auxiliary arrays
        meta: JSON-serializable metadata

    Returns:
        Path written
    '''
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"{_PARAM}{k}": np.asarray(v) for k, v in params.items()}
    arrays.update({
        f"{_STATE}{k}": np.asarray(v)
        for k, v in (state or {}).items()
    })
    arrays[_META] = np.array(json.dumps(dict(meta or {}), sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path],
                    expected: Optional[Mapping[str, tuple]] = None
                    ) -> Checkpoint:
    '''
    Read a checkpoint written by `save_checkpoint`

    Args:
        path: .npz file
        expected: Parameter shapes of the target architecture

    Raises:
        CheckpointError: If the file is malformed or shapes differ
        OSError: If the file cannot be read
    '''
    try:
        with np.load(path, allow_pickle=False) as archive:
            contents = {k: archive[k] for k in archive.files}
    except (ValueError, KeyError, EOFError, zipfile.BadZipFile) as e:
        logger.error(f"Could not parse checkpoint {path}")
        raise CheckpointError(f"Malformed checkpoint {path}: {e}") from e

    if _META not in contents:
        raise CheckpointError(f"{path} has no metadata record")
    try:
        meta = json.loads(str(contents.pop(_META)))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Malformed metadata in {path}") from e

    params = ModelParams({
        k[len(_PARAM):]: v
        for k, v in contents.items() if k.startswith(_PARAM)
    })
    state = {
        k[len(_STATE):]: v
        for k, v in contents.items() if k.startswith(_STATE)
    }
    checkpoint = Checkpoint(params, state, meta)
    if expected is not None:
        checkpoint.check_shapes(expected)
    return checkpoint
