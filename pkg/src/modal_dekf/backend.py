"""Selection between the compiled filter kernels and the NumPy fallback.

The compiled extension (``modal_dekf._fastpath``) implements the same
recursions as the reference loops in :mod:`modal_dekf.cekf` and
:mod:`modal_dekf.distributed`; it is preferred when importable.  Set
``MODAL_DEKF_BACKEND=python`` (or ``compiled``) to force a choice globally.
"""

from __future__ import annotations

import os

from .errors import ValidationError

_BACKENDS = ("compiled", "python")
_compiled = None
_probed = False


def compiled_kernels():
    """The compiled kernel module, or None when unavailable."""
    global _compiled, _probed
    if not _probed:
        _probed = True
        try:
            from . import _fastpath  # noqa: PLC0415
            _compiled = _fastpath
        except ImportError:
            _compiled = None
    return _compiled


def available_backends() -> tuple[str, ...]:
    return _BACKENDS if compiled_kernels() is not None else ("python",)


def default_backend() -> str:
    forced = os.environ.get("MODAL_DEKF_BACKEND")
    if forced:
        return resolve_backend(forced)
    return "compiled" if compiled_kernels() is not None else "python"


def resolve_backend(name: str | None) -> str:
    """Validate a backend request; None means the environment default."""
    if name is None:
        return default_backend()
    name = name.lower()
    if name not in _BACKENDS:
        raise ValidationError(f"unknown backend {name!r}, expected one of {_BACKENDS}")
    if name == "compiled" and compiled_kernels() is None:
        raise ValidationError("compiled kernels requested but the extension is not built")
    return name
