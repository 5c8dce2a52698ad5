"""Hot loops (tree boosting, grid geometry), with a compiled backend and a numpy fallback.

The compiled extension is used when it imports cleanly; setting
``PICKRANK_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("PICKRANK_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

best_splits = _impl.best_splits
predict_forest = _impl.predict_forest
neighbor_pairs = _impl.neighbor_pairs
plate_blocked = _impl.plate_blocked
partition_rows = _impl.partition_rows

__all__ = ["BACKEND", "best_splits", "predict_forest", "neighbor_pairs", "plate_blocked", "partition_rows"]
