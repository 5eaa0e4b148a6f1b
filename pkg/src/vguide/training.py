"""Losses, class posterior, Adam with cosine decay, and the two training loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContextLengthError, TrainingError
from .model import Control, ControlledSequence, ModelConfig, ModelParameters, forward
from .tokenizer import BOS, EOS, PAD, Vocab

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    batch_size: int = 8
    lr_init: float = 3e-4
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    lam: float = 0.5
    grad_clip: float | None = 1.0
    heldout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigurationError("epochs and batch_size must be positive")
        if not self.lr_init > 0:
            raise ConfigurationError("lr_init must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ConfigurationError("heldout_fraction must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParameters) -> "AdamState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
            0,
        )


# --- batching -----------------------------------------------------------------


def _pack(sequences):
    """Right-padded inputs, targets and per-position weights for a batch.

    Weights implement the per-sequence mean over scored positions; positions
    masked out (instruction tokens, padding) weigh zero.
    """
    if not sequences:
        raise TrainingError("empty batch")
    width = max(len(s.tokens) for s in sequences) - 1
    if width < 1:
        raise TrainingError("every sequence needs at least one token after its prefix")
    b = len(sequences)
    inputs = np.full((b, width), PAD, dtype=np.int64)
    targets = np.full((b, width), PAD, dtype=np.int64)
    mask = np.zeros((b, width))
    for i, s in enumerate(sequences):
        n = len(s.tokens) - 1
        inputs[i, :n] = s.tokens[:-1]
        targets[i, :n] = s.tokens[1:]
        mask[i, :n] = 1.0 if s.loss_mask is None else s.loss_mask
    return inputs, targets, mask


def _leaves(params, p):
    return p if p is not None else {k: ad.Tensor(v) for k, v in params.tensors.items()}


def _per_sequence_logprob(params, sequences, p):
    """(batch,) tensor of summed scored log-probs, plus the scored-token counts."""
    inputs, targets, mask = _pack(sequences)
    lp = forward(params, inputs, p)
    b, w = inputs.shape
    rows, cols = np.meshgrid(np.arange(b), np.arange(w), indexing="ij")
    picked = ad.slice_(lp, (rows, cols, targets))
    return ad.total(ad.mul(picked, mask), axis=1), mask.sum(axis=1)


def _mean_nll(params, sequences, p):
    lp_sum, counts = _per_sequence_logprob(params, sequences, p)
    if np.any(counts == 0):
        raise TrainingError("a sequence has no scored positions")
    per_seq = ad.mul(lp_sum, -1.0 / counts)
    return ad.scale(ad.total(per_seq), 1.0 / len(sequences))


# --- losses -------------------------------------------------------------------


def nll_loss(params: ModelParameters, sequences, p=None) -> ad.Tensor:
    """Mean over sequences of the mean per-position negative log-likelihood."""
    return _mean_nll(params, list(sequences), _leaves(params, p))


def generative_loss(params: ModelParameters, batch, p=None) -> ad.Tensor:
    """Class-conditional NLL; each sequence is conditioned on its own control code."""
    batch = list(batch)
    for i, s in enumerate(batch):
        if s.control is Control.NONE:
            raise TrainingError(f"sequence {i} has no control-code prefix")
    return _mean_nll(params, batch, _leaves(params, p))


def _class_log_scores(params, bodies, p):
    """Unnormalized log posterior scores, shape (batch, 2) for (POS, NEG).

    score_c = log softmax(b)_c + (alpha / t) * log p(x_{1:t} | c)
    """
    pos = [ControlledSequence.conditioned(b, Control.POS) for b in bodies]
    neg = [ControlledSequence.conditioned(b, Control.NEG) for b in bodies]
    ll, counts = _per_sequence_logprob(params, pos + neg, p)
    n = len(bodies)
    t = counts[:n]
    if np.any(t == 0):
        raise ValueError("class posterior needs t >= 1 tokens")
    ll2 = ad.transpose(ad.reshape(ll, (2, n)), (1, 0))
    log_prior = ad.log_softmax(p["class_bias"])
    scaled = ad.mul(ad.mul(ll2, (1.0 / t)[:, None]), p["alpha"])
    return ad.add(scaled, log_prior), ll


def class_log_posterior(params: ModelParameters, bodies, p=None) -> ad.Tensor:
    """(batch, 2) log posteriors over (POS, NEG) for the token bodies (no prefix)."""
    p = _leaves(params, p)
    scores, _ = _class_log_scores(params, [tuple(b) for b in bodies], p)
    return ad.log_softmax(scores)


def class_posterior(params: ModelParameters, tokens) -> float:
    """Probability of the POS class for x_{1:t}, via Bayes rule with alpha/t."""
    tokens = tuple(int(x) for x in tokens)
    if not tokens:
        raise ValueError("class posterior is undefined for t = 0")
    return float(np.exp(class_log_posterior(params, [tokens]).data[0, 0]))


def posterior_from_loglik(ll_pos, ll_neg, t, alpha, class_bias):
    """Closed-form POS posterior from the two class log-likelihoods (log domain)."""
    if t < 1:
        raise ValueError("class posterior is undefined for t = 0")
    b = np.asarray(class_bias, dtype=np.float64)
    log_prior = b - np.logaddexp(b[0], b[1])
    s_pos = log_prior[0] + alpha / t * np.asarray(ll_pos, dtype=np.float64)
    s_neg = log_prior[1] + alpha / t * np.asarray(ll_neg, dtype=np.float64)
    return np.exp(s_pos - np.logaddexp(s_pos, s_neg))


def _split_labeled(batch):
    bodies, labels = [], []
    for i, s in enumerate(batch):
        if s.label is None:
            raise TrainingError(f"sequence {i} carries no label")
        bodies.append(s.tokens[1:])
        labels.append(0 if s.label is Control.POS else 1)
    return bodies, np.asarray(labels)


def discriminative_loss(params: ModelParameters, batch, p=None) -> ad.Tensor:
    """Mean of -log p(c_y | x_{1:n}) at full length with the true label."""
    batch = list(batch)
    bodies, labels = _split_labeled(batch)
    p = _leaves(params, p)
    scores, _ = _class_log_scores(params, bodies, p)
    logpost = ad.log_softmax(scores)
    return ad.scale(ad.cross_entropy_from_logprobs(logpost, labels), 1.0 / len(batch))


def _hybrid_parts(params, batch, p):
    """L_g and L_d from one shared forward over both control codes."""
    bodies, labels = _split_labeled(batch)
    for i, s in enumerate(batch):
        if s.control is Control.NONE:
            raise TrainingError(f"sequence {i} has no control-code prefix")
        if (s.control is Control.POS) != (labels[i] == 0):
            raise TrainingError(f"sequence {i}: control code disagrees with its label")
    scores, ll = _class_log_scores(params, bodies, p)
    n = len(batch)
    counts = np.array([len(b) for b in bodies], dtype=np.float64)
    # row i of the POS half is sequence i; the NEG half follows
    true_rows = labels * n + np.arange(n)
    ll_true = ad.slice_(ll, true_rows)
    l_g = ad.scale(ad.total(ad.mul(ll_true, -1.0 / counts)), 1.0 / n)
    l_d = ad.scale(ad.cross_entropy_from_logprobs(ad.log_softmax(scores), labels), 1.0 / n)
    return l_g, l_d


def hybrid_loss(params: ModelParameters, batch, lam: float, p=None) -> ad.Tensor:
    """lam * L_g + (1 - lam) * L_d."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must lie in [0, 1], got {lam}")
    p = _leaves(params, p)
    l_g, l_d = _hybrid_parts(params, list(batch), p)
    return ad.add(ad.scale(l_g, lam), ad.scale(l_d, 1.0 - lam))


def loss_and_grads(loss_fn, params: ModelParameters, *args, **kwargs):
    """Evaluate ``loss_fn(params, *args, p=leaves)`` and return (value, grads dict)."""
    with ad.Tape() as tape:
        p = {k: ad.Tensor(v) for k, v in params.tensors.items()}
        loss = loss_fn(params, *args, p=p, **kwargs)
    grads = tape.gradients(loss, list(p.values()))
    return float(loss.data), dict(zip(p, grads))


# --- optimizer ----------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        raise ConfigurationError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return float(lr_min)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adam_step(params: ModelParameters, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.95, eps=1e-8):
    """One bias-corrected Adam update; returns fresh (params, state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params.tensors[name].shape:
            raise TrainingError(f"gradient for {name!r} has shape {g.shape}")
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_t, new_m, new_v = {}, {}, {}
    for name, w in params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        new_t[name] = w - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return ModelParameters(params.config, new_t), AdamState(new_m, new_v, step)


def clip_by_global_norm(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


# --- sequence construction -----------------------------------------------------


def instruction_sequence(vocab: Vocab, instruction: str, answer: str) -> ControlledSequence:
    """BOS + instruction + answer + EOS, with the loss on answer and EOS only."""
    prompt = vocab.encode(instruction)
    reply = vocab.encode(answer) + [EOS]
    mask = [0.0] * len(prompt) + [1.0] * len(reply)
    return ControlledSequence((BOS, *prompt, *reply), Control.NONE, None, mask)


def labeled_sequence(vocab: Vocab, text: str, label: Control) -> ControlledSequence:
    return ControlledSequence.conditioned(vocab.encode(text) + [EOS], label, label)


def _check_context(sequences, context_length):
    for i, s in enumerate(sequences):
        if len(s.tokens) - 1 > context_length:
            raise ContextLengthError(
                f"example {i} needs {len(s.tokens) - 1} positions; context is {context_length}"
            )


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class TrainLog:
    """Line-delimited JSON training records, mirrored into memory."""

    FIELDS = ("epoch", "step", "lr", "L", "L_g", "L_d", "heldout_acc")

    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "w", encoding="utf-8", newline="\n") if path else None

    def write(self, **values):
        rec = {k: values.get(k) for k in self.FIELDS}
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _optimize(params, sequences, loss_fn, config: TrainConfig, epoch_hook):
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(sequences) / config.batch_size)
    total = steps_per_epoch * config.epochs
    state = AdamState.zeros_like(params)
    step = 0
    for epoch in range(config.epochs):
        losses = []
        for idx in _batches(len(sequences), config.batch_size, rng):
            batch = [sequences[i] for i in idx]
            lr = cosine_lr(step, total, config.lr_init, config.lr_min)
            value, grads = loss_and_grads(loss_fn, params, batch)
            grads = clip_by_global_norm(grads, config.grad_clip)
            params, state = adam_step(
                params, grads, state, lr, config.beta1, config.beta2, config.eps
            )
            losses.append(value)
            step += 1
        epoch_hook(epoch, step, lr, params, float(np.mean(losses)))
    return params


def _evaluate_in_chunks(fn, items, chunk=64):
    vals = [fn(items[i : i + chunk]) * len(items[i : i + chunk]) for i in range(0, len(items), chunk)]
    return float(sum(vals) / len(items))


@dataclass
class TrainResult:
    params: ModelParameters
    history: list
    initial_loss: float
    final_loss: float
    heldout_acc: float | None = None


def train_generator(examples, vocab: Vocab, model_config: ModelConfig,
                    config: TrainConfig, log_path=None, init: ModelParameters | None = None
                    ) -> TrainResult:
    """Instruction tuning: mean NLL on answer tokens, prompts loss-masked."""
    sequences = [instruction_sequence(vocab, e.instruction, e.answer) for e in examples]
    if not sequences:
        raise TrainingError("training corpus is empty")
    _check_context(sequences, model_config.context_length)
    params = init.copy() if init is not None else ModelParameters.init(model_config)

    def full_loss(p):
        return _evaluate_in_chunks(lambda b: float(nll_loss(p, b).data), sequences)

    initial = full_loss(params)
    tlog = TrainLog(log_path)

    def hook(epoch, step, lr, p, mean_loss):
        tlog.write(epoch=epoch, step=step, lr=lr, L=mean_loss)
        log.info("generator epoch %d step %d lr %.3g loss %.4f", epoch, step, lr, mean_loss)

    try:
        params = _optimize(params, sequences, nll_loss, config, hook)
    finally:
        tlog.close()
    return TrainResult(params, tlog.records, initial, full_loss(params))


def heldout_accuracy(params: ModelParameters, sequences) -> float:
    """Fraction where argmax of the class posterior equals the label."""
    if not sequences:
        return float("nan")
    correct = 0
    for i in range(0, len(sequences), 64):
        chunk = sequences[i : i + 64]
        bodies, labels = _split_labeled(chunk)
        logpost = class_log_posterior(params, bodies).data
        pred = np.where(logpost[:, 0] >= logpost[:, 1], 0, 1)
        correct += int((pred == labels).sum())
    return correct / len(sequences)


def split_heldout(items, fraction, seed):
    if fraction <= 0 or len(items) < 2:
        return list(items), []
    order = np.random.default_rng(seed + 7919).permutation(len(items))
    n_hold = max(1, int(round(fraction * len(items))))
    hold = set(order[:n_hold].tolist())
    train = [x for i, x in enumerate(items) if i not in hold]
    held = [x for i, x in enumerate(items) if i in hold]
    return train, held


def train_discriminator(examples, vocab: Vocab, model_config: ModelConfig,
                        config: TrainConfig, heldout=None, log_path=None,
                        init: ModelParameters | None = None) -> TrainResult:
    """Hybrid generative/discriminative training of the class-conditional LM.

    ``examples`` are (text, Control) pairs or objects with ``text``/``label``.
    Without an explicit ``heldout`` set, ``config.heldout_fraction`` of the
    examples is held out for the accuracy report.
    """
    pairs = [_as_pair(e) for e in examples]
    if heldout is None:
        pairs, held_pairs = split_heldout(pairs, config.heldout_fraction, config.seed)
    else:
        held_pairs = [_as_pair(e) for e in heldout]
    labels = {lab for _, lab in pairs}
    if labels != {Control.POS, Control.NEG}:
        raise TrainingError("discriminator training needs both POS and NEG examples")
    sequences = [labeled_sequence(vocab, t, lab) for t, lab in pairs]
    held = [labeled_sequence(vocab, t, lab) for t, lab in held_pairs]
    _check_context(sequences + held, model_config.context_length)
    params = init.copy() if init is not None else ModelParameters.init(model_config)
    if init is not None:
        params.tensors["alpha"] = np.ones(())
        params.tensors["class_bias"] = np.zeros(2)
    lam = config.lam

    def full_loss(p):
        tot = np.zeros(2)
        for i in range(0, len(sequences), 64):
            chunk = sequences[i : i + 64]
            l_g, l_d = _hybrid_parts(p, chunk, _leaves(p, None))
            tot += len(chunk) * np.array([float(l_g.data), float(l_d.data)])
        return tuple((tot / len(sequences)).tolist())

    lg0, ld0 = full_loss(params)
    tlog = TrainLog(log_path)
    seen = []

    def loss_fn(p_, batch, p=None):
        l_g, l_d = _hybrid_parts(p_, batch, p)
        seen.append((float(l_g.data), float(l_d.data)))
        return ad.add(ad.scale(l_g, lam), ad.scale(l_d, 1.0 - lam))

    def hook(epoch, step, lr, p, mean_loss):
        lg, ld = np.mean(seen, axis=0).tolist()
        seen.clear()
        acc = heldout_accuracy(p, held) if held else None
        tlog.write(epoch=epoch, step=step, lr=lr, L=mean_loss, L_g=lg, L_d=ld, heldout_acc=acc)
        log.info(
            "discriminator epoch %d step %d loss %.4f alpha %.3f bias %s acc %s",
            epoch, step, mean_loss, p.alpha, np.round(p.class_bias, 3), acc,
        )

    try:
        params = _optimize(params, sequences, loss_fn, config, hook)
    finally:
        tlog.close()
    lg1, ld1 = full_loss(params)
    acc = heldout_accuracy(params, held) if held else None
    return TrainResult(
        params,
        tlog.records,
        lam * lg0 + (1 - lam) * ld0,
        lam * lg1 + (1 - lam) * ld1,
        acc,
    )


def _as_pair(example):
    if isinstance(example, tuple):
        text, label = example
    else:
        text, label = example.text, example.label
    if isinstance(label, str):
        label = Control(label.lower())
    if label not in (Control.POS, Control.NEG):
        raise TrainingError(f"label must be POS or NEG, got {label!r}")
    return text, label


def config_dict(config) -> dict:
    return asdict(config)
