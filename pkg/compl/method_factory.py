"""
Registry of self-supervised auxiliary methods, keyed by the `aux` value of
a training configuration
"""

from __future__ import annotations
from typing import TYPE_CHECKING
if TYPE_CHECKING:
    from .auxiliary.mixins import AuxiliaryMethod, AuxSettings

import importlib
import pkgutil

import logging

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()


class MethodFactory(object):
    '''
    Builds auxiliary methods from their key

    Attributes:
        _methods: Mapping method keys to `AuxiliaryMethod` subclasses
    '''

    _methods: dict[str, type[AuxiliaryMethod]]

    def __init__(self):
        self._methods = {}

    def get_method(self, key: str, settings: AuxSettings) -> AuxiliaryMethod:
        '''
        Raises:
            KeyError: If no method is registered under `key`
        '''
        if key not in self._methods:
            logger.error(f"No auxiliary method registered as {key}; "
                         f"known methods are {sorted(self._methods)}")
            raise KeyError(key)
        return self._methods[key](settings)

    def register_method(self, method_class: type[AuxiliaryMethod],
                        key: str) -> None:
        '''
        Registering the same class twice is a no-op

        Raises:
            KeyError: If `key` already belongs to another class
        '''
        current = self._methods.get(key)
        if current is not None and current is not method_class:
            logger.error(f"Auxiliary method {key} is already registered as "
                         f"{current.__name__}")
            raise KeyError(key)
        self._methods[key] = method_class

    def view_methods(self) -> dict[str, type[AuxiliaryMethod]]:
        return dict(self._methods)


factory = MethodFactory()


def register_method(method_class: type[AuxiliaryMethod], key: str) -> None:
    factory.register_method(method_class, key)


def view_methods() -> dict[str, type[AuxiliaryMethod]]:
    return factory.view_methods()


def get_method(key: str, settings: AuxSettings) -> AuxiliaryMethod:
    return factory.get_method(key, settings)


def _discover_methods() -> None:
    '''
    Import every module of compl.auxiliary and run its `_run_imports`
    '''
    import compl.auxiliary
    for _, name, _ in pkgutil.iter_modules(compl.auxiliary.__path__):
        module = importlib.import_module(f"{compl.auxiliary.__name__}.{name}")
        if hasattr(module, "_run_imports"):
            module._run_imports()


_discover_methods()
