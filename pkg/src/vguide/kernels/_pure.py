"""Pure-Python reference implementations of the hot kernels.

Every function here has a twin with the same name and contract in the
compiled ``_fast`` module; tests hold the two to identical outputs.
"""

import re
from collections import Counter

import numpy as np

# Pairs are packed into one integer key so both backends share a dict layout.
PAIR_SHIFT = 32

_LEXEMES = re.compile(
    r'//[^\n]*|/\*.*?(?:\*/|\Z)|"(?:\\.|\\\Z|[^"\\\n])*(?:"|$)',
    re.DOTALL | re.MULTILINE,
)


def pack_pair(a, b):
    return (a << PAIR_SHIFT) | b


def unpack_pair(key):
    return key >> PAIR_SHIFT, key & ((1 << PAIR_SHIFT) - 1)


def count_pairs(seq):
    """Count adjacent id pairs in a flat sequence; negative ids are separators."""
    counts = Counter()
    prev = -1
    for tok in seq.tolist():
        if tok >= 0 and prev >= 0:
            counts[(prev << PAIR_SHIFT) | tok] += 1
        prev = tok
    return dict(counts)


def merge_pair(seq, a, b, new_id):
    """Replace every non-overlapping (a, b) occurrence, scanning left to right."""
    src = seq.tolist()
    out = []
    i = 0
    n = len(src)
    while i < n:
        if i + 1 < n and src[i] == a and src[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(src[i])
            i += 1
    return np.asarray(out, dtype=np.int64)


def apply_merges(seq, ranks):
    """Encode one byte-id sequence with ranked merges.

    ``ranks`` maps a packed pair key to ``(rank, merged_id)``. At each round
    the lowest-ranked pair present is merged at all of its occurrences.
    """
    ids = seq.tolist()
    while len(ids) >= 2:
        best = None
        for x, y in zip(ids, ids[1:]):
            hit = ranks.get((x << PAIR_SHIFT) | y)
            if hit is not None and (best is None or hit[0] < best[0]):
                best = (hit[0], hit[1], x, y)
        if best is None:
            break
        _, new_id, a, b = best
        merged = []
        i = 0
        n = len(ids)
        while i < n:
            if i + 1 < n and ids[i] == a and ids[i + 1] == b:
                merged.append(new_id)
                i += 2
            else:
                merged.append(ids[i])
                i += 1
        ids = merged
    return np.asarray(ids, dtype=np.int64)


def _blank(match):
    # keep newlines so line numbers and offsets survive
    return re.sub(r"[^\n]", " ", match.group(0))


def strip_comments(text):
    """Blank out comments and string literals, preserving length and newlines."""
    return _LEXEMES.sub(_blank, text)
