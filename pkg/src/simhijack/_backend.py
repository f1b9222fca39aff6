"""Backend selection: compiled extension when importable, pure Python otherwise.

Set SIMHIJACK_PURE_PYTHON=1 to force the fallback (used by the parity tests
and the backend benchmark).
"""

import os

if os.environ.get("SIMHIJACK_PURE_PYTHON"):
    from . import _pycodec as impl

    BACKEND = "python"
else:
    try:
        from . import _speedups as impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        from . import _pycodec as impl  # type: ignore[no-redef]

        BACKEND = "python"
