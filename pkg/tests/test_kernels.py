import importlib
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vguide import kernels
from vguide.kernels import _pure

fast = pytest.importorskip("vguide.kernels._fast")

id_seqs = st.lists(st.integers(-1, 12), max_size=80).map(lambda x: np.asarray(x, dtype=np.int64))
verilogish = st.text(alphabet=st.sampled_from(list('ab/*"\\\n e\t') + ["é", "😀"]), max_size=120)


def test_backend_selected():
    assert kernels.BACKEND == "compiled"


def test_env_forces_pure_backend():
    code = "import vguide.kernels as k; print(k.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={"VGUIDE_PURE": "1", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "pure"


@given(id_seqs)
def test_count_pairs_agree(seq):
    assert fast.count_pairs(seq) == _pure.count_pairs(seq)


@given(id_seqs, st.integers(0, 12), st.integers(0, 12))
def test_merge_pair_agree(seq, a, b):
    np.testing.assert_array_equal(fast.merge_pair(seq, a, b, 99), _pure.merge_pair(seq, a, b, 99))


def test_merge_pair_non_overlapping_left_to_right():
    seq = np.array([1, 1, 1], dtype=np.int64)
    assert _pure.merge_pair(seq, 1, 1, 7).tolist() == [7, 1]
    assert fast.merge_pair(seq, 1, 1, 7).tolist() == [7, 1]


@given(st.lists(st.integers(0, 5), max_size=60))
def test_apply_merges_agree(ids):
    seq = np.asarray(ids, dtype=np.int64)
    ranks = {
        _pure.pack_pair(0, 1): (0, 6),
        _pure.pack_pair(6, 2): (1, 7),
        _pure.pack_pair(3, 3): (2, 8),
        _pure.pack_pair(8, 8): (3, 9),
    }
    np.testing.assert_array_equal(fast.apply_merges(seq, ranks), _pure.apply_merges(seq, ranks))


@given(verilogish)
def test_strip_comments_agree_and_preserve_layout(text):
    a, b = fast.strip_comments(text), _pure.strip_comments(text)
    assert a == b
    assert len(a) == len(text)
    assert [i for i, c in enumerate(a) if c == "\n"] == [i for i, c in enumerate(text) if c == "\n"]


def test_strip_comments_cases():
    src = 'a // x\nb /* y\nz */ c "s // t" d'
    out = kernels.strip_comments(src)
    assert out.split() == ["a", "b", "c", "d"]
    assert out.count("\n") == 2


def test_unterminated_block_comment_runs_to_end():
    assert kernels.strip_comments("x /* never closed\nmodule").split() == ["x"]


def test_pack_roundtrip():
    for a, b in [(0, 0), (5, 260), (2**31, 7)]:
        assert kernels.unpack_pair(kernels.pack_pair(a, b)) == (a, b)


def test_reload_is_stable():
    mod = importlib.reload(kernels)
    assert mod.BACKEND in ("compiled", "pure")
