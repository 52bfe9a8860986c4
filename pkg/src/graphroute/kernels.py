"""Kernel backend selection.

The compiled extension is used when it imports; set
``GRAPHROUTE_PURE_PYTHON=1`` to force the reference implementation.
"""

import os

from . import _kernels_py

if os.environ.get("GRAPHROUTE_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = _impl.BACKEND
build_nsw = _impl.build_nsw
bfs = _impl.bfs
search = _impl.search

SCORE_NEG_L2 = 0
SCORE_DOT = 1
POLICY_BEST = 0
POLICY_SOFTMAX = 1
POLICY_REF = 2

python_backend = _kernels_py
