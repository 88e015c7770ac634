"""Backend selection for the fast-weight recurrence.

The compiled kernel is used when it imports; set ``FASTWEIGHTS_BACKEND=python``
to force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _recurrence_py

_FALLBACK = _recurrence_py

try:
    from . import _recurrence as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _recurrence_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled


def get_backend(name: str | None = None):
    """Return the kernel module for ``name`` (default: env override, else fastest available)."""
    name = name or os.environ.get("FASTWEIGHTS_BACKEND") or ("cython" if _compiled is not None else "python")
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}") from None


def default_backend_name() -> str:
    return get_backend().BACKEND
