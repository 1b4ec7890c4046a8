"""Hot-kernel dispatch: compiled extension when available, numpy fallback
otherwise. Set VISITLIFT_PURE=1 to force the fallback (used by the benchmark
and the cross-backend tests)."""

from __future__ import annotations

import os

from . import _pure

if os.environ.get("VISITLIFT_PURE", "") == "1":
    _impl = _pure
else:
    try:
        from . import _speedups as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _pure

sweep_labels = _impl.sweep_labels
nearest_site = _impl.nearest_site
lump_windows = _impl.lump_windows


def backend_name() -> str:
    return "compiled" if _impl is not _pure else "pure"


def backends() -> dict[str, object]:
    """All importable backends, keyed by name (for benchmarks/tests)."""
    found: dict[str, object] = {"pure": _pure}
    try:
        from . import _speedups

        found["compiled"] = _speedups
    except ImportError:
        pass
    return found
