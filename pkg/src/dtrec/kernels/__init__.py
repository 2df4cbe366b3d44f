"""Hot kernels: compiled extension when built, numpy fallback otherwise.

Set ``DTREC_PURE_PYTHON=1`` to force the fallback. Even with the extension
built, kernels where numpy's SIMD/BLAS paths measured faster than the scalar
loops stay on numpy (see ``benchmarks/bench_kernels.py``).
"""

import importlib
import os

from . import _fallback

NAMES = (
    "all_finite",
    "layer_norm_forward",
    "layer_norm_backward",
    "gelu_forward",
    "gelu_backward",
    "scatter_add_rows",
    "assign_nearest",
    "accumulate_centers",
    "count_ranks",
    "hartigan_refine",
)
# vectorised transcendental / BLAS-screened versions beat the compiled loops
NUMPY_PREFERRED = frozenset({"all_finite", "gelu_forward", "gelu_backward", "assign_nearest"})

BACKEND = "python"
_compiled = None

if os.environ.get("DTREC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        _compiled = importlib.import_module(__name__ + "._compiled")
        BACKEND = "compiled"
    except ImportError:
        _compiled = None


def implementation(name: str, backend: str | None = None):
    """The function serving ``name``; ``backend`` forces "python" or "compiled"."""
    if name not in NAMES:
        raise KeyError(name)
    if backend == "python" or _compiled is None:
        return getattr(_fallback, name)
    if backend == "compiled" or name not in NUMPY_PREFERRED:
        return getattr(_compiled, name)
    return getattr(_fallback, name)


all_finite = implementation("all_finite")
layer_norm_forward = implementation("layer_norm_forward")
layer_norm_backward = implementation("layer_norm_backward")
gelu_forward = implementation("gelu_forward")
gelu_backward = implementation("gelu_backward")
scatter_add_rows = implementation("scatter_add_rows")
assign_nearest = implementation("assign_nearest")
accumulate_centers = implementation("accumulate_centers")
count_ranks = implementation("count_ranks")
hartigan_refine = implementation("hartigan_refine")

__all__ = ["BACKEND", "NAMES", "NUMPY_PREFERRED", "implementation", *NAMES]
