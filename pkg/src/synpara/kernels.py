"""Kernel backend selection.

Two interchangeable backends provide the hot numeric kernels: the compiled
Cython module `_ckernels` and the numpy module `_pykernels`. The active one
is chosen at import time from the SYNPARA_KERNELS environment variable
("auto", "c", "py"; default "auto" prefers the compiled backend and falls
back to numpy when the extension was not built).

Callers look functions up on this module at call time (`kernels.gelu_fwd`),
so `use_backend` can swap implementations mid-process, and tests can
monkeypatch a single rule.
"""

from __future__ import annotations

import os

from . import _pykernels
from .errors import ValidationError

_KERNEL_NAMES = (
    "gelu_fwd",
    "gelu_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "cross_entropy_fwd",
    "cross_entropy_bwd",
    "adamw_update",
)

_active_backend = None


def _compiled_module():
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


def available_backends() -> list:
    names = ["py"]
    if _compiled_module() is not None:
        names.insert(0, "c")
    return names


def use_backend(name: str) -> str:
    """Bind this module's kernel functions to the named backend.

    Returns the name of the backend actually activated ("c" or "py").
    """
    global _active_backend
    if name == "py":
        mod = _pykernels
    elif name == "c":
        mod = _compiled_module()
        if mod is None:
            raise ValidationError(
                "kernel backend 'c' requested but the compiled extension is not built"
            )
    elif name == "auto":
        mod = _compiled_module() or _pykernels
    else:
        raise ValidationError(
            f"unknown kernel backend {name!r}; expected one of auto, c, py"
        )
    for fn_name in _KERNEL_NAMES:
        globals()[fn_name] = getattr(mod, fn_name)
    _active_backend = mod.BACKEND_NAME
    return _active_backend


def backend_name() -> str:
    return _active_backend


use_backend(os.environ.get("SYNPARA_KERNELS", "auto"))
