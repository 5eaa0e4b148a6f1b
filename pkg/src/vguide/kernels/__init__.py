"""Hot kernels: the compiled extension when built, else the pure-Python twin.

Set ``VGUIDE_PURE=1`` to force the fallback. ``BACKEND`` names the module
that was selected.
"""

import os

from . import _pure
from ._pure import PAIR_SHIFT, pack_pair, unpack_pair

_impl = _pure
if os.environ.get("VGUIDE_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _fast as _impl
    except ImportError:  # extension not built
        _impl = _pure

BACKEND = "compiled" if _impl is not _pure else "pure"

count_pairs = _impl.count_pairs
merge_pair = _impl.merge_pair
apply_merges = _impl.apply_merges
strip_comments = _impl.strip_comments

__all__ = [
    "BACKEND",
    "PAIR_SHIFT",
    "apply_merges",
    "count_pairs",
    "merge_pair",
    "pack_pair",
    "strip_comments",
    "unpack_pair",
]
