"""Kernel backend selection: compiled extension if present, else pure Python.

Set CHAINSIM_PURE_PYTHON=1 to force the fallback (used by the benchmark and
the backend-equivalence test). Both backends produce bit-identical output.
"""

import os

if os.environ.get("CHAINSIM_PURE_PYTHON") == "1":
    from chainsim import _kernels_py as _impl
else:
    try:
        from chainsim import _kernels_c as _impl  # type: ignore[no-redef]
    except ImportError:
        from chainsim import _kernels_py as _impl  # type: ignore[no-redef]

BACKEND = _impl.BACKEND
MASK64 = _impl.MASK64
mix64 = _impl.mix64
fnv1a = _impl.fnv1a
draw_u64 = _impl.draw_u64
bernoulli_count = _impl.bernoulli_count
geometric_attempts = _impl.geometric_attempts
