"""Byte-level BPE tokenizer with reserved control-code specials."""

from __future__ import annotations

import hashlib
import re
from pathlib import Path

import numpy as np

from . import kernels
from .errors import VocabError

BOS, EOS, PAD, CTRL_POS, CTRL_NEG = range(5)
SPECIAL_NAMES = ("BOS", "EOS", "PAD", "CTRL_POS", "CTRL_NEG")
NUM_SPECIALS = len(SPECIAL_NAMES)
BYTE_OFFSET = NUM_SPECIALS
BASE_SIZE = NUM_SPECIALS + 256
DEFAULT_VOCAB_SIZE = 512

FORMAT_VERSION = 1
_HEADER = "vguide-vocab"
_ESC = re.compile(rb"\\x([0-9a-f]{2})")


def _escape(token: bytes) -> str:
    return "".join(
        chr(b) if 0x21 <= b <= 0x7E and b != 0x5C else f"\\x{b:02x}" for b in token
    )


def _unescape(text: str) -> bytes:
    return _ESC.sub(lambda m: bytes([int(m.group(1), 16)]), text.encode("ascii"))


class Vocab:
    """Immutable id <-> token mapping plus the ranked merge table.

    Ids 0..4 are the specials (BOS, EOS, PAD, CTRL_POS, CTRL_NEG), ids 5..260
    are the 256 single bytes, and later ids are merge results in rank order.
    A merge whose bytes are already spelled by an earlier id reuses that id.
    """

    def __init__(self, merges=()):
        tokens = [f"<{name}>".encode() for name in SPECIAL_NAMES]
        tokens += [bytes([b]) for b in range(256)]
        token_to_id = {tok: i for i, tok in enumerate(tokens) if i >= NUM_SPECIALS}
        ranks = {}
        table = []
        for rank, merge in enumerate(merges):
            a, b = int(merge[0]), int(merge[1])
            if not (BYTE_OFFSET <= a < len(tokens) and BYTE_OFFSET <= b < len(tokens)):
                raise VocabError(f"merge {rank} references unknown ids ({a}, {b})")
            key = kernels.pack_pair(a, b)
            if key in ranks:
                raise VocabError(f"merge {rank} repeats pair ({a}, {b})")
            joined = tokens[a] + tokens[b]
            target = token_to_id.get(joined)
            if target is None:
                # two merge paths can spell the same bytes; the later one aliases
                target = len(tokens)
                tokens.append(joined)
                token_to_id[joined] = target
            ranks[key] = (rank, target)
            table.append((a, b, target))
        self.merges = tuple(table)
        self.id_to_token = tuple(tokens)
        self.token_to_id = token_to_id
        self.specials = dict(zip(SPECIAL_NAMES, range(NUM_SPECIALS)))
        self._ranks = ranks

    def __len__(self):
        return len(self.id_to_token)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.merges == other.merges

    def __hash__(self):
        return hash(self.merges)

    @property
    def size(self):
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        raw = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        if raw.size == 0:
            return []
        ids = kernels.apply_merges(raw + BYTE_OFFSET, self._ranks)
        return ids.tolist()

    def decode(self, ids, skip_special=True) -> str:
        out = bytearray()
        n = len(self.id_to_token)
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise VocabError(f"token id {i} out of range for vocab of size {n}")
            if i < NUM_SPECIALS:
                if not skip_special:
                    out += self.id_to_token[i]
                continue
            out += self.id_to_token[i]
        return out.decode("utf-8", errors="replace")

    def token_count(self, text: str) -> int:
        return len(self.encode(text))

    def dumps(self) -> str:
        lines = [f"{_HEADER} {FORMAT_VERSION} {self.size}"]
        lines += [f"special {name}" for name in SPECIAL_NAMES]
        lines += [f"byte {_escape(bytes([b]))}" for b in range(256)]
        aliases = []
        for rank, (a, b, target) in enumerate(self.merges):
            if target >= BASE_SIZE and self.id_to_token[target] == (
                self.id_to_token[a] + self.id_to_token[b]
            ) and not any(m[2] == target for m in self.merges[:rank]):
                lines.append(f"merge {rank} {a} {b} {_escape(self.id_to_token[target])}")
            else:
                aliases.append(f"alias {rank} {a} {b} {target}")
        return "\n".join(lines + aliases) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.dumps().encode("ascii")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="ascii", newline="\n")

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        lines = text.splitlines()
        if not lines:
            raise VocabError("empty vocab file")
        head = lines[0].split()
        if len(head) != 3 or head[0] != _HEADER:
            raise VocabError(f"bad vocab header: {lines[0]!r}")
        if int(head[1]) != FORMAT_VERSION:
            raise VocabError(f"unsupported vocab format version {head[1]}")
        size = int(head[2])
        body = lines[1:]
        if len(body) < size:
            raise VocabError(f"vocab header declares {size} tokens, found {len(body)}")
        for i, name in enumerate(SPECIAL_NAMES):
            if body[i] != f"special {name}":
                raise VocabError(f"special token line {i} is {body[i]!r}")
        for b in range(256):
            line = body[NUM_SPECIALS + b]
            if not line.startswith("byte ") or _unescape(line[5:]) != bytes([b]):
                raise VocabError(f"byte token line {b} is {line!r}")
        ranked = {}
        spelled = {}
        for line in body[BASE_SIZE:]:
            parts = line.split(" ")
            if len(parts) != 5 or parts[0] not in ("merge", "alias"):
                raise VocabError(f"bad merge line {line!r}")
            rank = int(parts[1])
            if rank in ranked:
                raise VocabError(f"duplicate merge rank {rank}")
            ranked[rank] = (int(parts[2]), int(parts[3]))
            if parts[0] == "merge":
                spelled[rank] = _unescape(parts[4])
        if sorted(ranked) != list(range(len(ranked))):
            raise VocabError("merge ranks are not contiguous")
        vocab = cls([ranked[r] for r in range(len(ranked))])
        if vocab.size != size:
            raise VocabError(f"vocab header declares {size} tokens, rebuilt {vocab.size}")
        for rank, tok in spelled.items():
            if vocab.id_to_token[vocab.merges[rank][2]] != tok:
                raise VocabError(f"merge rank {rank} does not spell {tok!r}")
        return vocab

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.loads(Path(path).read_text(encoding="ascii"))


def build_vocab(corpus_texts, target_size: int = DEFAULT_VOCAB_SIZE) -> Vocab:
    """Greedy pair merges over the whole corpus until ``target_size`` ids exist.

    A pair must occur at least twice to be merged. Frequency ties go to the
    lexicographically smaller (left bytes, right bytes) pair.
    """
    texts = [t for t in corpus_texts]
    if not texts or all(not t for t in texts):
        raise VocabError("cannot build a vocabulary from an empty corpus")
    if target_size < BASE_SIZE:
        raise VocabError(f"target_size must be at least {BASE_SIZE}, got {target_size}")

    chunks = []
    for text in texts:
        raw = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        chunks.append(raw + BYTE_OFFSET)
        chunks.append(np.array([-1], dtype=np.int64))
    flat = np.concatenate(chunks)

    tokens = [b""] * NUM_SPECIALS + [bytes([b]) for b in range(256)]
    spelled = {tok: i for i, tok in enumerate(tokens) if i >= NUM_SPECIALS}
    merges = []
    while len(tokens) < target_size:
        counts = kernels.count_pairs(flat)
        if not counts:
            break
        top = max(counts.values())
        if top < 2:
            break
        a, b = min(
            (kernels.unpack_pair(k) for k, c in counts.items() if c == top),
            key=lambda p: (tokens[p[0]], tokens[p[1]]),
        )
        joined = tokens[a] + tokens[b]
        target = spelled.get(joined)
        if target is None:
            target = len(tokens)
            tokens.append(joined)
            spelled[joined] = target
        flat = kernels.merge_pair(flat, a, b, target)
        merges.append((a, b))
    return Vocab(merges)


def encode(text: str, vocab: Vocab) -> list[int]:
    return vocab.encode(text)


def decode(ids, vocab: Vocab) -> str:
    return vocab.decode(ids)


class ByteCounter:
    """Stand-in tokenizer counting one token per UTF-8 byte.

    BPE merges only shrink a sequence, so this is an upper bound on the
    token count under any vocabulary built from it.
    """

    def encode(self, text: str) -> list[int]:
        return [b + BYTE_OFFSET for b in text.encode("utf-8")]

    def token_count(self, text: str) -> int:
        return len(text.encode("utf-8"))
