"""Tiny decoder-only transformer used as generator and as discriminator."""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ConfigurationError, ContextLengthError
from .tokenizer import BOS, CTRL_NEG, CTRL_POS, Vocab

MAGIC = b"VGUIDECK"
FORMAT_VERSION = 1
_MASK_VALUE = -1e9


class Control(enum.Enum):
    POS = "pos"
    NEG = "neg"
    NONE = "none"

    @property
    def token(self) -> int:
        return {Control.POS: CTRL_POS, Control.NEG: CTRL_NEG, Control.NONE: BOS}[self]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    context_length: int = 256
    embed_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "context_length", "embed_dim", "num_layers", "num_heads"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.context_length < 2:
            raise ConfigurationError("context_length must be at least 2")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass(frozen=True)
class ControlledSequence:
    """Token ids whose first entry is the conditioning prefix.

    With ``control`` POS/NEG the prefix is the matching control code; with
    NONE it is whatever context token the caller chose (normally BOS).
    """

    tokens: tuple
    control: Control = Control.NONE
    label: Control | None = None
    loss_mask: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ValueError("a controlled sequence needs at least its prefix token")
        if self.control is not Control.NONE and self.tokens[0] != self.control.token:
            raise ValueError(f"{self.control} sequence must start with its control code")
        if self.label is Control.NONE:
            raise ValueError("label must be POS or NEG")
        if self.loss_mask is not None:
            object.__setattr__(self, "loss_mask", tuple(float(m) for m in self.loss_mask))
            if len(self.loss_mask) != len(self.tokens) - 1:
                raise ValueError("loss_mask needs one weight per predicted token")

    @classmethod
    def conditioned(cls, body, control: Control, label=None, loss_mask=None):
        return cls((control.token, *body), control, label, loss_mask)

    def with_control(self, control: Control) -> "ControlledSequence":
        return ControlledSequence(
            (control.token, *self.tokens[1:]), control, self.label, self.loss_mask
        )


def parameter_layout(config: ModelConfig) -> list[tuple[str, tuple]]:
    """Tensor names and shapes, in checkpoint order."""
    d, v, t = config.embed_dim, config.vocab_size, config.context_length
    layout = [("tok_emb", (v, d)), ("pos_emb", (t, d))]
    for i in range(config.num_layers):
        layout += [
            (f"l{i}.ln1_g", (d,)),
            (f"l{i}.ln1_b", (d,)),
            (f"l{i}.attn_qkv", (d, 3 * d)),
            (f"l{i}.attn_out", (d, d)),
            (f"l{i}.ln2_g", (d,)),
            (f"l{i}.ln2_b", (d,)),
            (f"l{i}.mlp_in", (d, 4 * d)),
            (f"l{i}.mlp_in_b", (4 * d,)),
            (f"l{i}.mlp_out", (4 * d, d)),
            (f"l{i}.mlp_out_b", (d,)),
        ]
    layout += [
        ("lnf_g", (d,)),
        ("lnf_b", (d,)),
        ("head", (d, v)),
        ("head_b", (v,)),
        ("alpha", ()),
        ("class_bias", (2,)),
    ]
    return layout


@dataclass
class ModelParameters:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig) -> "ModelParameters":
        rng = np.random.default_rng(config.seed)
        resid_std = 0.02 / math.sqrt(2 * config.num_layers)
        tensors = {}
        for name, shape in parameter_layout(config):
            short = name.split(".")[-1]
            if short.endswith("_g"):
                arr = np.ones(shape)
            elif short.endswith("_b") or short == "class_bias":
                arr = np.zeros(shape)
            elif short == "alpha":
                arr = np.ones(shape)
            elif short in ("attn_out", "mlp_out"):
                arr = rng.normal(0.0, resid_std, shape)
            else:
                arr = rng.normal(0.0, 0.02, shape)
            tensors[name] = arr
        # identical control-code rows: an untrained discriminator is exactly neutral
        tensors["tok_emb"][CTRL_NEG] = tensors["tok_emb"][CTRL_POS]
        return cls(config, tensors)

    @property
    def alpha(self) -> float:
        return float(self.tensors["alpha"])

    @property
    def class_bias(self) -> np.ndarray:
        return self.tensors["class_bias"]

    def names(self):
        return list(self.tensors)

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), _MASK_VALUE), k=1)


def forward(params: ModelParameters, ids, p=None, last_only=False) -> ad.Tensor:
    """Log-probabilities of shape (batch, time, vocab) for a padded id batch.

    ``p`` maps names to tensors (training passes recorded leaves); it defaults
    to constant wraps of the stored arrays. ``last_only`` keeps only the final
    position, which is all decoding needs.
    """
    cfg = params.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    b, t = ids.shape
    if t < 1 or t > cfg.context_length:
        raise ContextLengthError(f"context of {t} tokens outside [1, {cfg.context_length}]")
    if p is None:
        p = {k: ad.Tensor(v) for k, v in params.tensors.items()}
    h_count, h_dim, d = cfg.num_heads, cfg.head_dim, cfg.embed_dim

    x = ad.add(ad.embedding_lookup(p["tok_emb"], ids), ad.slice_(p["pos_emb"], slice(0, t)))
    mask = _causal_mask(t)
    inv_sqrt = 1.0 / math.sqrt(h_dim)
    for i in range(cfg.num_layers):
        pre = f"l{i}."
        h = ad.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        qkv = ad.reshape(ad.matmul(h, p[pre + "attn_qkv"]), (b, t, 3, h_count, h_dim))
        qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = (ad.slice_(qkv, j) for j in range(3))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        att = ad.exp(ad.log_softmax(ad.add(scores, mask)))
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
        x = ad.add(x, ad.matmul(o, p[pre + "attn_out"]))
        h = ad.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
        m = ad.tanh(ad.add(ad.matmul(h, p[pre + "mlp_in"]), p[pre + "mlp_in_b"]))
        x = ad.add(x, ad.add(ad.matmul(m, p[pre + "mlp_out"]), p[pre + "mlp_out_b"]))
    if last_only:
        x = ad.slice_(x, (slice(None), slice(t - 1, t)))
    x = ad.layer_norm(x, p["lnf_g"], p["lnf_b"])
    logits = ad.add(ad.matmul(x, p["head"]), p["head_b"])
    return ad.log_softmax(logits)


def next_token_logprobs(params: ModelParameters, context) -> np.ndarray:
    """Log-probability vector over the vocabulary for the token after ``context``."""
    context = list(context)
    if not context:
        raise ContextLengthError("next_token_logprobs needs a non-empty context")
    return forward(params, np.asarray(context)[None, :], last_only=True).data[0, -1]


def sequence_log_prob(params: ModelParameters, seq: ControlledSequence) -> float:
    """Sum of log p(x_t | x_<t, prefix) over every token after the prefix."""
    tokens = np.asarray(seq.tokens, dtype=np.int64)
    if len(tokens) < 2:
        return 0.0
    lp = forward(params, tokens[None, :-1]).data[0]
    return float(lp[np.arange(len(tokens) - 1), tokens[1:]].sum())


def _config_block(config: ModelConfig) -> bytes:
    return json.dumps(asdict(config), sort_keys=True).encode("utf-8")


def save_checkpoint(params: ModelParameters, path, vocab: Vocab | None = None) -> None:
    """Binary checkpoint: magic, version, config, vocab hash, float64 tensors."""
    vocab_hash = bytes.fromhex(vocab.sha256()) if vocab is not None else bytes(32)
    if vocab is not None and vocab.size != params.config.vocab_size:
        raise CheckpointError(
            f"vocab of size {vocab.size} does not match model vocab_size {params.config.vocab_size}"
        )
    cfg = _config_block(params.config)
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg)), cfg, vocab_hash]
    layout = parameter_layout(params.config)
    chunks.append(struct.pack("<I", len(layout)))
    for name, shape in layout:
        arr = np.asarray(params.tensors[name], dtype="<f8")
        if arr.shape != shape:
            raise CheckpointError(f"tensor {name} has shape {arr.shape}, layout says {shape}")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, vocab: Vocab | None = None) -> ModelParameters:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = blob[pos : pos + n]
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a vguide checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    try:
        config = ModelConfig(**json.loads(take(cfg_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from None
    stored_hash = take(32)
    if vocab is not None and stored_hash != bytes.fromhex(vocab.sha256()):
        raise CheckpointError(f"{path}: vocabulary hash does not match the supplied vocab")
    (count,) = struct.unpack("<I", take(4))
    layout = parameter_layout(config)
    if count != len(layout):
        raise CheckpointError(f"{path}: expected {len(layout)} tensors, found {count}")
    tensors = {}
    for name, shape in layout:
        (n,) = struct.unpack("<H", take(2))
        got = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if got != name or tuple(dims) != shape:
            raise CheckpointError(f"{path}: tensor {got}{dims} where {name}{shape} expected")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after the last tensor")
    return ModelParameters(config, tensors)


def checkpoint_vocab_hash(path) -> str:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a vguide checkpoint (bad magic)")
    (cfg_len,) = struct.unpack("<I", blob[12:16])
    return blob[16 + cfg_len : 48 + cfg_len].hex()
