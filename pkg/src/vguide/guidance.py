"""Discriminator-guided decoding.

At every step the base model proposes a next-token distribution, the
class-conditional discriminator scores each candidate under both control
codes, and the Bayes posterior of the POS class reweights and filters the
candidates before sampling.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ShapeError, VocabError
from .model import ModelParameters, next_token_logprobs
from .tokenizer import BOS, CTRL_NEG, CTRL_POS, EOS


class RankBy(str, enum.Enum):
    POSTERIOR = "posterior"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 1.5
    rho: float = 0.9
    tau: float = 0.75
    temperature: float = 0.8
    max_new_tokens: int = 256
    rank_by: RankBy = RankBy.POSTERIOR

    def __post_init__(self):
        if not self.w >= 0:
            raise ConfigurationError(f"guidance weight w must be >= 0, got {self.w}")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in (0, 1], got {self.rho}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError(f"tau must lie in [0, 1], got {self.tau}")
        if not self.temperature >= 0:
            raise ConfigurationError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_new_tokens < 0:
            raise ConfigurationError("max_new_tokens must be >= 0")
        object.__setattr__(self, "rank_by", RankBy(self.rank_by))


@dataclass(frozen=True)
class GuidanceState:
    """Running discriminator log-likelihoods of the tokens since the control prefix.

    ``lp_pos``/``lp_neg`` cache the two next-token log-prob vectors for the
    current step; :func:`advance_state` consumes and clears them.
    """

    ll_pos: float = 0.0
    ll_neg: float = 0.0
    t: int = 0
    lp_pos: np.ndarray | None = None
    lp_neg: np.ndarray | None = None

    @property
    def ready(self) -> bool:
        return self.lp_pos is not None and self.lp_neg is not None


def observe(state: GuidanceState, disc: ModelParameters, body) -> GuidanceState:
    """Cache next-token log-probs under both codes: the two forward passes of a step."""
    lp_pos = next_token_logprobs(disc, [CTRL_POS, *body])
    lp_neg = next_token_logprobs(disc, [CTRL_NEG, *body])
    return replace(state, lp_pos=lp_pos, lp_neg=lp_neg)


def advance_state(state: GuidanceState, token: int) -> GuidanceState:
    if not state.ready:
        raise ValueError("advance_state needs cached next-token log-probs")
    if not 0 <= token < state.lp_pos.size:
        raise VocabError(f"token id {token} out of range for vocab of size {state.lp_pos.size}")
    return GuidanceState(
        state.ll_pos + float(state.lp_pos[token]),
        state.ll_neg + float(state.lp_neg[token]),
        state.t + 1,
    )


def _log_posterior(state, alpha, class_bias):
    if not state.ready:
        raise ValueError("guidance state has no cached next-token log-probs")
    b = np.asarray(class_bias, dtype=np.float64)
    log_prior = b - np.logaddexp(b[0], b[1])
    k = alpha / (state.t + 1)
    s_pos = log_prior[0] + k * (state.ll_pos + state.lp_pos)
    s_neg = log_prior[1] + k * (state.ll_neg + state.lp_neg)
    return s_pos - np.logaddexp(s_pos, s_neg)


def token_posteriors(state: GuidanceState, disc) -> np.ndarray:
    """POS posterior if each candidate were appended; ``disc`` supplies alpha and b."""
    return np.exp(_log_posterior(state, disc.alpha, disc.class_bias))


def weighted_logits(base_logprobs, log_post, w: float):
    """Unnormalized log of p_LLM * posterior^w; w = 0 returns the base untouched."""
    if w == 0:
        return np.asarray(base_logprobs, dtype=np.float64)
    return np.asarray(base_logprobs) + w * np.asarray(log_post)


def weighted_distribution(base_logprobs, posteriors, w: float):
    """Normalized p_w (probabilities)."""
    if np.shape(base_logprobs) != np.shape(posteriors):
        raise ShapeError(
            f"base log-probs {np.shape(base_logprobs)} vs posteriors {np.shape(posteriors)}"
        )
    with np.errstate(divide="ignore"):
        z = weighted_logits(base_logprobs, np.log(posteriors), w)
    return _softmax(z)


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass(frozen=True)
class FilterSets:
    ranked: np.ndarray
    m: int
    v_rank: np.ndarray
    v_tau: np.ndarray
    v_k: np.ndarray
    fallback: bool = False

    def mask(self, size: int) -> np.ndarray:
        allowed = np.zeros(size, dtype=bool)
        allowed[self.v_k] = True
        return allowed


def build_filter_sets(p_w, posteriors, rho: float, tau: float,
                      rank_by: RankBy | str = RankBy.POSTERIOR) -> FilterSets:
    """V_rank: top-ranked tokens until p_w mass reaches rho; V_tau: posterior > tau."""
    p_w = np.asarray(p_w, dtype=np.float64)
    posteriors = np.asarray(posteriors, dtype=np.float64)
    ids = np.arange(p_w.size)
    key = posteriors if RankBy(rank_by) is RankBy.POSTERIOR else p_w
    ranked = np.lexsort((ids, -key))  # descending key, then ascending id
    cum = np.cumsum(p_w[ranked])
    # rho = 1 keeps everything; otherwise a tiny tolerance absorbs cumsum rounding
    if rho >= 1.0:
        m = p_w.size
    else:
        m = min(int(np.searchsorted(cum, rho - 1e-12, side="left")) + 1, p_w.size)
    v_rank = np.sort(ranked[:m])
    v_tau = np.flatnonzero(posteriors > tau)
    v_k = np.union1d(v_rank, v_tau)
    if v_k.size == 0:
        return FilterSets(ranked, m, v_rank, v_tau, np.array([int(np.argmax(p_w))]), True)
    return FilterSets(ranked, m, v_rank, v_tau, v_k)


def sample_token(logits, allowed, temperature: float, rng: np.random.Generator) -> int:
    """Draw from softmax(logits / temperature) restricted to ``allowed``.

    Always consumes exactly one uniform draw so guided and unguided runs with
    the same seed stay aligned. Temperature 0 is greedy (lowest id on ties).
    """
    u = rng.random()
    z = np.where(allowed, np.asarray(logits, dtype=np.float64), -np.inf)
    if temperature == 0:
        return int(np.argmax(z))
    z = z / temperature
    p = np.exp(z - z.max())
    cum = np.cumsum(p)
    idx = int(np.searchsorted(cum, u * cum[-1], side="right"))
    idx = min(idx, p.size - 1)
    while not allowed[idx]:  # u * total landed exactly on a masked boundary
        idx -= 1
    return idx


@dataclass(frozen=True)
class TraceStep:
    token: int
    kept: int
    posterior: float


@dataclass
class GenerationResult:
    tokens: list
    stop_reason: str
    trace: list = field(default_factory=list)


def _context_room(params: ModelParameters, ctx_len: int) -> bool:
    return ctx_len <= params.config.context_length


def sample_unguided(base: ModelParameters, prompt_ids, temperature: float = 0.8,
                    max_new_tokens: int = 256, seed=0) -> GenerationResult:
    """Plain ancestral sampling from the base model."""
    rng = np.random.default_rng(seed)
    ctx = [BOS, *prompt_ids]
    out = []
    allowed = np.ones(base.config.vocab_size, dtype=bool)
    while len(out) < max_new_tokens:
        if not _context_room(base, len(ctx)):
            return GenerationResult(out, "context")
        lp = next_token_logprobs(base, ctx)
        tok = sample_token(weighted_logits(lp, None, 0.0), allowed, temperature, rng)
        if tok == EOS:
            return GenerationResult(out, "eos")
        out.append(tok)
        ctx.append(tok)
    return GenerationResult(out, "max_tokens")


def generate(base: ModelParameters, disc: ModelParameters, prompt_ids, config: GuidanceConfig,
             seed=0, disc_prompt_ids=()) -> GenerationResult:
    """Guided sampling; returns generated ids (EOS excluded) and a per-step trace.

    The base model sees BOS + prompt; the discriminator sees its control code
    followed by ``disc_prompt_ids`` and the generated tokens.
    """
    if base.config.vocab_size != disc.config.vocab_size:
        raise ConfigurationError(
            f"base vocab {base.config.vocab_size} != discriminator vocab {disc.config.vocab_size}"
        )
    rng = np.random.default_rng(seed)
    ctx = [BOS, *prompt_ids]
    disc_body = list(disc_prompt_ids)
    state = GuidanceState()
    for i, tok in enumerate(disc_body):  # score the discriminator prompt
        state = advance_state(observe(state, disc, disc_body[:i]), tok)
    out, trace = [], []
    while len(out) < config.max_new_tokens:
        if not (_context_room(base, len(ctx)) and _context_room(disc, len(disc_body) + 1)):
            return GenerationResult(out, "context", trace)
        base_lp = next_token_logprobs(base, ctx)
        state = observe(state, disc, disc_body)
        log_post = _log_posterior(state, disc.alpha, disc.class_bias)
        post = np.exp(log_post)
        logits = weighted_logits(base_lp, log_post, config.w)
        sets = build_filter_sets(_softmax(logits), post, config.rho, config.tau, config.rank_by)
        tok = sample_token(logits, sets.mask(logits.size), config.temperature, rng)
        trace.append(TraceStep(tok, int(sets.v_k.size), float(post[tok])))
        if tok == EOS:
            return GenerationResult(out, "eos", trace)
        out.append(tok)
        ctx.append(tok)
        disc_body.append(tok)
        state = advance_state(state, tok)
    return GenerationResult(out, "max_tokens", trace)
