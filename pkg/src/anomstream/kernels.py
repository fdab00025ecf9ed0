"""Backend selection for the NCE kernel.

The compiled extension is preferred when importable; set
``ANOMSTREAM_PURE_PYTHON=1`` (or pass backend="numpy") to force the
fallback. Both backends are deterministic run-to-run; they are not
bit-identical to each other, so a reproducible pipeline must pin one.
"""

from __future__ import annotations

import os

from . import _nce_numpy
from .errors import ConfigError

try:
    from . import _nce as _nce_compiled
except ImportError:
    _nce_compiled = None


def available_backends() -> list[str]:
    names = ["numpy"]
    if _nce_compiled is not None:
        names.insert(0, "compiled")
    return names


def get_backend(name: str = "auto"):
    if name in ("auto", None):
        if os.environ.get("ANOMSTREAM_PURE_PYTHON"):
            return _nce_numpy
        return _nce_compiled if _nce_compiled is not None else _nce_numpy
    if name == "numpy":
        return _nce_numpy
    if name == "compiled":
        if _nce_compiled is None:
            raise ConfigError("compiled kernel requested but not built")
        return _nce_compiled
    raise ConfigError(f"unknown kernel backend {name!r}")
