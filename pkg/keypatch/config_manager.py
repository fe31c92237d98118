from __future__ import annotations
import json
import logging
import os
from types import ModuleType
from typing import Any, Dict, List, Optional

from keypatch.errors import ConfigurationError

logger = logging.getLogger(__name__)


class ConfigManager:
    """
    Layers JSON overrides on top of the UPPERCASE defaults in a config module.

    Only UPPERCASE keys that exist in the defaults module are accepted, and an
    override must have the same type as its default (ints are accepted where a
    float is expected).
    """

    def __init__(self, defaults_module: ModuleType, overrides_path: Optional[str] = None):
        self._defaults = defaults_module
        self._overrides_path = overrides_path
        self._overrides: Dict[str, Any] = {}
        if overrides_path is not None:
            self._load()

    def _load(self):
        if not os.path.exists(self._overrides_path):
            raise ConfigurationError(f"config file not found: {self._overrides_path}")
        try:
            with open(self._overrides_path, "r") as f:
                loaded = json.load(f)
        except (OSError, ValueError) as e:
            raise ConfigurationError(f"cannot read config overrides {self._overrides_path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config overrides {self._overrides_path} must be a JSON object")
        for k, v in loaded.items():
            if k.isupper() and hasattr(self._defaults, k):
                self._overrides[k] = self._coerce(k, v)
            else:
                logger.warning("[CONFIG] ignoring unknown key %s in %s", k, self._overrides_path)

    def _coerce(self, key: str, value: Any) -> Any:
        default = getattr(self._defaults, key)
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
        elif isinstance(default, float):
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                return float(value)
        elif isinstance(default, int):
            if isinstance(value, int) and not isinstance(value, bool):
                return value
        elif isinstance(default, list):
            if isinstance(value, (list, tuple)):
                return list(value)
        elif isinstance(value, type(default)):
            return value
        raise ConfigurationError(
            f"{key}={value!r} has type {type(value).__name__}, expected {type(default).__name__}"
        )

    def get_effective(self) -> Dict[str, Any]:
        eff: Dict[str, Any] = {}
        for k in dir(self._defaults):
            if k.isupper():
                eff[k] = getattr(self._defaults, k)
        eff.update(self._overrides)
        return eff

    def set_overrides(self, overrides: Dict[str, Any]) -> List[str]:
        changes = []

        for k, v in overrides.items():
            if not k.isupper() or not hasattr(self._defaults, k):
                logger.warning("[CONFIG] ignoring unknown key %s", k)
                continue
            v = self._coerce(k, v)
            old_value = self._overrides.get(k, "default")
            if k not in self._overrides or self._overrides[k] != v:
                changes.append(f"{k}={v}(was:{old_value})")
                self._overrides[k] = v

        if changes:
            logger.info("[CONFIG] %s", ", ".join(changes))

        return changes
