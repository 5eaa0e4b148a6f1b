"""Compare the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from vguide.dialects import dialect_corpus
from vguide.kernels import _pure
from vguide.tokenizer import BYTE_OFFSET, build_vocab

try:
    from vguide.kernels import _fast
except ImportError:
    _fast = None


def _workload():
    texts = [t for t, _ in dialect_corpus(400, seed=11)]
    vocab = build_vocab(texts, 400)
    joined = "\n".join(texts)
    raw = np.frombuffer(joined.encode(), dtype=np.uint8).astype(np.int64) + BYTE_OFFSET
    commented = "\n".join(f"{t}// note {i}\n/* block\n comment */ \"str // x\"" for i, t in
                          enumerate(texts[:200]))
    return vocab, raw, commented


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    vocab, raw, commented = _workload()
    a, b = int(raw[0]), int(raw[1])
    cases = {
        "count_pairs": lambda k: k.count_pairs(raw),
        "merge_pair": lambda k: k.merge_pair(raw, a, b, 999),
        "apply_merges": lambda k: k.apply_merges(raw, vocab._ranks),
        "strip_comments": lambda k: k.strip_comments(commented),
    }
    backends = [("pure", _pure)] + ([("compiled", _fast)] if _fast is not None else [])
    print(f"{'kernel':<16}" + "".join(f"{name:>14}" for name, _ in backends) + f"{'speedup':>10}")
    for label, fn in cases.items():
        times = []
        for _, mod in backends:
            t = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
            times.append(t)
        speed = f"{times[0] / times[1]:9.1f}x" if len(times) == 2 else "       n/a"
        print(f"{label:<16}" + "".join(f"{t * 1e3:12.2f}ms" for t in times) + speed)
    if _fast is None:
        print("compiled extension not built; only the pure backend was timed")


if __name__ == "__main__":
    main()
