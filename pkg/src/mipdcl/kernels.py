"""Backend selection for the batch ODE kernel.

The compiled extension is used when it imports cleanly.  Setting the
environment variable ``MIPDCL_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _fallback

try:
    if os.environ.get("MIPDCL_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-Python backend requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

BACKEND = "compiled" if _compiled is not None else "python"


def _impl(backend):
    try:
        return BACKENDS[backend or BACKEND]
    except KeyError:
        raise ValueError(f"unknown or unavailable backend {backend!r}") from None


def simulate_segment(*args, backend=None, **kwargs):
    """Coupled PK/PD batch integration; see ``_fallback.simulate_segment``."""
    return _impl(backend).simulate_segment(*args, **kwargs)


def pk_profile(*args, backend=None, **kwargs):
    """Concentration knot table; see ``_fallback.pk_profile``."""
    return _impl(backend).pk_profile(*args, **kwargs)


def simulate_pd(*args, backend=None, **kwargs):
    """PD batch integration on shared profiles; see ``_fallback.simulate_pd``."""
    return _impl(backend).simulate_pd(*args, **kwargs)
