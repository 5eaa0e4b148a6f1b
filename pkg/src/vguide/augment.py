"""Augmentation: complete module heads at high temperature, syntax-filter, label."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .corpus import VerilogUnit, autocomplete_prompt
from .errors import ConfigurationError
from .guidance import sample_unguided
from .labelers import LabelKind, Labeler, MetricResult
from .model import Control, ModelParameters
from .tokenizer import Vocab

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 1.2


@dataclass(frozen=True)
class AugmentJob:
    heads: tuple
    samples_per_head: int = 4
    temperature: float = DEFAULT_TEMPERATURE
    labeler: str = "syntax"
    reference: str | None = None
    max_new_tokens: int = 256
    seed: int = 0

    def __post_init__(self):
        heads = tuple(h.definition if isinstance(h, VerilogUnit) else str(h) for h in self.heads)
        object.__setattr__(self, "heads", heads)
        if self.samples_per_head < 1:
            raise ConfigurationError("samples_per_head must be positive")
        if not self.temperature > 0:
            raise ConfigurationError("augmentation temperature must be positive")

    def check_labeler(self, labeler: Labeler) -> None:
        relative = labeler.kind is LabelKind.RELATIVE
        if relative and self.reference is None:
            raise ConfigurationError(f"relative labeler {labeler.name} needs a reference design")
        if not relative and self.reference is not None:
            raise ConfigurationError(f"absolute labeler {labeler.name} takes no reference")


@dataclass(frozen=True)
class Candidate:
    head_index: int
    sample_index: int
    text: str


@dataclass(frozen=True)
class LabeledExample:
    text: str
    label: Control
    metric_value: float | None = None
    labeler: str = ""
    reference_metric: float | None = None
    reason: str = ""

    def to_record(self) -> dict:
        return {
            "text": self.text,
            "label": "POS" if self.label is Control.POS else "NEG",
            "metric_value": self.metric_value,
            "labeler": self.labeler,
            "reference_metric": self.reference_metric,
            "reason": self.reason,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LabeledExample":
        label = Control.POS if rec["label"].upper() == "POS" else Control.NEG
        return cls(rec["text"], label, rec.get("metric_value"), rec.get("labeler", ""),
                   rec.get("reference_metric"), rec.get("reason", ""))


@dataclass
class AugmentReport:
    skipped_heads: list = field(default_factory=list)
    generated: int = 0
    syntax_passed: int = 0
    syntax_failed: int = 0
    checker_errors: int = 0

    @property
    def survival_rate(self) -> float:
        return self.syntax_passed / self.generated if self.generated else 0.0


def complete_heads(model: ModelParameters, vocab: Vocab, job: AugmentJob,
                   report: AugmentReport | None = None) -> list[Candidate]:
    """``samples_per_head`` unguided completions of every head, in (head, sample) order."""
    report = report if report is not None else AugmentReport()
    out = []
    limit = model.config.context_length
    for h, head in enumerate(job.heads):
        prompt = vocab.encode(autocomplete_prompt(head))
        if len(prompt) + 1 >= limit:
            report.skipped_heads.append((h, f"head needs {len(prompt) + 1} of {limit} positions"))
            continue
        for s in range(job.samples_per_head):
            res = sample_unguided(model, prompt, job.temperature, job.max_new_tokens,
                                  seed=[job.seed, h, s])
            out.append(Candidate(h, s, vocab.decode(res.tokens)))
    report.generated += len(out)
    return out


def _texts(candidates):
    return [c.text if isinstance(c, Candidate) else c for c in candidates]


def _run_all(labeler: Labeler, texts, workers: int) -> list[MetricResult]:
    if workers <= 1 or len(texts) <= 1:
        return [labeler.run(t) for t in texts]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(labeler.run, texts))  # map keeps input order


def syntax_filter(candidates, checker: Labeler, report: AugmentReport | None = None,
                  workers: int = 1) -> list:
    """Candidates the checker accepts; checker failures are tallied apart from rejects."""
    report = report if report is not None else AugmentReport()
    candidates = list(candidates)
    results = _run_all(checker, _texts(candidates), workers)
    kept = []
    for cand, res in zip(candidates, results):
        if not res.ok:
            report.checker_errors += 1
        elif res.value == 1.0:
            report.syntax_passed += 1
            kept.append(cand)
        else:
            report.syntax_failed += 1
    return kept


def label_absolute(candidates, labeler: Labeler, workers: int = 1) -> list[LabeledExample]:
    if labeler.kind is not LabelKind.ABSOLUTE:
        raise ConfigurationError(f"{labeler.name} is not an absolute labeler")
    if not labeler.available():
        raise ConfigurationError(f"labeler {labeler.name} is unavailable (tool missing)")
    texts = _texts(candidates)
    out = []
    for text, res in zip(texts, _run_all(labeler, texts, workers)):
        if not res.ok:
            out.append(LabeledExample(text, Control.NEG, None, labeler.name, None,
                                      f"{res.status.value}: {res.reason}"))
        else:
            label = Control.POS if res.value == 1.0 else Control.NEG
            out.append(LabeledExample(text, label, res.value, labeler.name))
    return out


def label_relative(candidates, labeler: Labeler, reference: str,
                   workers: int = 1) -> list[LabeledExample]:
    """POS iff the candidate's metric is strictly below the reference's (ties are NEG)."""
    if labeler.kind is not LabelKind.RELATIVE:
        raise ConfigurationError(f"{labeler.name} is not a relative labeler")
    if not labeler.available():
        raise ConfigurationError(f"labeler {labeler.name} is unavailable (tool missing)")
    ref = labeler.run(reference)
    if not ref.ok:
        raise ConfigurationError(
            f"reference metric failed ({ref.status.value}): {ref.reason or ref.raw_output[-200:]}"
        )
    texts = _texts(candidates)
    out = []
    for text, res in zip(texts, _run_all(labeler, texts, workers)):
        if not res.ok:
            out.append(LabeledExample(text, Control.NEG, None, labeler.name, ref.value,
                                      f"{res.status.value}: {res.reason}"))
            continue
        label = Control.POS if res.value < ref.value else Control.NEG
        out.append(LabeledExample(text, label, res.value, labeler.name, ref.value))
    return out


def run_job(model: ModelParameters, vocab: Vocab, job: AugmentJob, labeler: Labeler,
            checker: Labeler, workers: int = 1, report: AugmentReport | None = None):
    """complete -> syntax filter -> label; returns (examples, report)."""
    job.check_labeler(labeler)
    report = report if report is not None else AugmentReport()
    candidates = complete_heads(model, vocab, job, report)
    survivors = syntax_filter(candidates, checker, report, workers)
    log.info("augment: %d generated, %d survived syntax (%.0f%%)",
             report.generated, len(survivors), 100 * report.survival_rate)
    if labeler.kind is LabelKind.RELATIVE:
        examples = label_relative(survivors, labeler, job.reference, workers)
    else:
        examples = label_absolute(survivors, labeler, workers)
    return examples, report


def write_labeled(examples, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


def read_labeled(path) -> list[LabeledExample]:
    with open(path, encoding="utf-8") as fh:
        return [LabeledExample.from_record(json.loads(line)) for line in fh if line.strip()]


def positive_examples_as_instructions(examples):
    """POS augmented modules as autocomplete pairs, for optional generator top-up."""
    from .corpus import SourceFile, build_instruction_pairs, extract_units

    units = []
    for ex in examples:
        if ex.label is Control.POS:
            units.extend(extract_units(SourceFile.from_text("augmented", ex.text)))
    return build_instruction_pairs([u for u in units if u.kind.value == "module"])

