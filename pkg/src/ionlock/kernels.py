"""Backend selection for the hot loops.

Imports the compiled extension when available, otherwise the pure-Python
reference implementation. Setting the environment variable
IONLOCK_FORCE_FALLBACK=1 (before import) forces the pure-Python backend;
``BACKEND`` reports which one is active.
"""

import os

from . import _kernels_py

if os.environ.get("IONLOCK_FORCE_FALLBACK", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "fallback"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on build environment
        _impl = _kernels_py
        BACKEND = "fallback"

free_run = _impl.free_run
closed_loop_chunk = _impl.closed_loop_chunk
