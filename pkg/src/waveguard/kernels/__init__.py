"""Hot-kernel backend selection.

Tries the compiled Cython extension first and falls back to the numpy
implementation. ``WAVEGUARD_NO_NATIVE=1`` forces the fallback; ``BACKEND``
records what was picked so callers (and the benchmark) can report it.
"""
from __future__ import annotations

import os

from . import _fallback

if os.environ.get("WAVEGUARD_NO_NATIVE") == "1":
    _impl = _fallback
    BACKEND = "fallback"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        _impl = _fallback
        BACKEND = "fallback"

im2col = _impl.im2col
col2im = _impl.col2im
ctc_forward_backward = _impl.ctc_forward_backward

__all__ = ["im2col", "col2im", "ctc_forward_backward", "BACKEND"]
