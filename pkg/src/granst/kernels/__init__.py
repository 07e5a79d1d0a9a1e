"""Element-kernel backend selection.

Two interchangeable backends produce the per-element dense blocks:

``pure``
    Vectorized numpy (:mod:`granst.kernels.reference`), always available.
``fast``
    Compiled extension (:mod:`granst.kernels._fast`), built at install
    time when a C compiler is present.

The default picks the compiled backend when importable and falls back to
numpy otherwise.  Set the environment variable ``GRANST_KERNELS`` to
``fast`` or ``pure`` to force a choice (forcing ``fast`` without the
extension raises).  Helpers that are not performance critical (viscosity
evaluation, jump-term mass blocks) always come from the reference module.
"""
from __future__ import annotations

import os

from ..errors import ConfigurationError
from . import reference
from .reference import tri_mass_blocks, viscosity_qp_prism, viscosity_qp_tet

__all__ = [
    "get_backend",
    "backend_name",
    "available_backends",
    "tri_mass_blocks",
    "viscosity_qp_prism",
    "viscosity_qp_tet",
]

_BLOCK_FUNCS = ("ns_prism_blocks", "ns_tet_blocks", "ls_prism_blocks", "ls_tet_blocks")


def _load_fast():
    try:
        from . import _fast
    except ImportError:
        return None
    return _fast


def available_backends() -> tuple:
    """Names of the backends importable in this installation."""
    names = ["pure"]
    if _load_fast() is not None:
        names.insert(0, "fast")
    return tuple(names)


def get_backend(name: str | None = None):
    """Return the module providing the four block-builder kernels.

    Parameters
    ----------
    name : str or module, optional
        "fast", "pure" (alias "reference"), or None to consult the
        ``GRANST_KERNELS`` environment variable and fall back to the
        best available backend.  A module already providing the block
        builders is returned unchanged, so resolved backends can be
        passed through solver layers.
    """
    if name is not None and all(hasattr(name, f) for f in _BLOCK_FUNCS):
        return name
    if name is None:
        name = os.environ.get("GRANST_KERNELS", "").strip().lower() or None
    if name in (None, "auto"):
        return _load_fast() or reference
    if name in ("pure", "reference"):
        return reference
    if name == "fast":
        fast = _load_fast()
        if fast is None:
            raise ConfigurationError(
                "compiled kernel backend requested via GRANST_KERNELS=fast "
                "but the extension is not built; reinstall with a C compiler "
                "or use GRANST_KERNELS=pure")
        return fast
    raise ConfigurationError(
        f"unknown kernel backend {name!r}; expected 'fast' or 'pure'")


def backend_name(module=None) -> str:
    """Short name ("fast" / "pure") of a backend module."""
    mod = module if module is not None else get_backend()
    return "pure" if mod is reference else "fast"
