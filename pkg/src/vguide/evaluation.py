"""pass@k estimation and the benchmark harness."""

from __future__ import annotations

import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .corpus import autocomplete_prompt
from .errors import ConfigurationError
from .guidance import GuidanceConfig, generate, sample_unguided
from .labelers import LabelKind, get_labeler
from .model import ModelParameters
from .tokenizer import Vocab

log = logging.getLogger(__name__)

DEFAULT_N = 20
DEFAULT_KS = (1, 5, 10)


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: 1 - C(n-c, k) / C(n, k), as a product of ratios."""
    for name, v in (("n", n), ("c", c), ("k", k)):
        if isinstance(v, bool) or not isinstance(v, int):
            raise TypeError(f"{name} must be an integer")
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if c == 0:
        return 0.0
    if n - c < k:
        return 1.0
    prod = 1.0
    for i in range(n - c + 1, n + 1):
        prod *= 1.0 - k / i
    return 1.0 - prod


@dataclass(frozen=True)
class Problem:
    id: str
    description: str
    module_definition: str
    checker: str
    reference: str | None = None

    def prompt(self) -> str:
        return f"{self.description.strip()}\n{autocomplete_prompt(self.module_definition)}"


@dataclass(frozen=True)
class EvalRecord:
    problem_id: str
    n: int
    c: int
    outcomes: tuple
    errors: int = 0

    def __post_init__(self):
        if len(self.outcomes) != self.n:
            raise ValueError(f"{self.problem_id}: {len(self.outcomes)} outcomes for n={self.n}")
        if self.c != sum(bool(o) for o in self.outcomes) or not 0 <= self.c <= self.n:
            raise ValueError(f"{self.problem_id}: c={self.c} disagrees with the outcomes")

    @classmethod
    def from_outcomes(cls, problem_id, outcomes, errors=0) -> "EvalRecord":
        outcomes = tuple(bool(o) for o in outcomes)
        return cls(problem_id, len(outcomes), sum(outcomes), outcomes, errors)

    def pass_at(self, k: int) -> float:
        return pass_at_k(self.n, self.c, k)


def load_problems(directory) -> list[Problem]:
    """Problems from ``<id>.desc.txt``, ``<id>.def.v`` and ``<id>.checker.json`` triples.

    The checker file holds ``{"labeler": NAME}`` plus an optional
    ``"reference"`` path, relative to the directory.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise OSError(f"problem directory {directory} not found")
    problems = []
    for desc in sorted(directory.glob("*.desc.txt")):
        pid = desc.name[: -len(".desc.txt")]
        def_path = directory / f"{pid}.def.v"
        chk_path = directory / f"{pid}.checker.json"
        if not def_path.is_file() or not chk_path.is_file():
            raise ConfigurationError(f"problem {pid}: missing .def.v or .checker.json")
        checker = json.loads(chk_path.read_text(encoding="utf-8"))
        if "labeler" not in checker:
            raise ConfigurationError(f"problem {pid}: checker file names no labeler")
        reference = None
        if checker.get("reference"):
            reference = (directory / checker["reference"]).read_text(encoding="utf-8")
        problems.append(Problem(pid, desc.read_text(encoding="utf-8"),
                                def_path.read_text(encoding="utf-8"), checker["labeler"],
                                reference))
    return problems


def _stream_seed(seed: int, problem_id: str, sample: int):
    return [seed, zlib.crc32(problem_id.encode("utf-8")), sample]


class _Judge:
    """Resolves a problem's checker once, including the reference metric."""

    def __init__(self, problem: Problem, labeler_factory):
        self.labeler = labeler_factory(problem.checker, problem.reference)
        self.ref_value = None
        if self.labeler.kind is LabelKind.RELATIVE:
            if problem.reference is None:
                raise ConfigurationError(f"problem {problem.id}: relative checker needs a reference")
            ref = self.labeler.run(problem.reference)
            if not ref.ok:
                raise ConfigurationError(f"problem {problem.id}: reference metric failed")
            self.ref_value = ref.value

    def __call__(self, text: str) -> bool:
        res = self.labeler.run(text)
        if self.ref_value is not None:
            return res.ok and res.value < self.ref_value
        return res.passed


def _default_factory(name, reference):
    return get_labeler(name, reference=reference if name == "equivalence" else None)


def evaluate_problem(problem: Problem, base: ModelParameters, vocab: Vocab, n: int,
                     disc: ModelParameters | None = None,
                     guidance: GuidanceConfig | None = None, seed: int = 0,
                     temperature: float = 0.8, max_new_tokens: int = 256,
                     labeler_factory=_default_factory) -> EvalRecord:
    judge = _Judge(problem, labeler_factory)
    prompt = vocab.encode(problem.prompt())
    outcomes, errors = [], 0
    for j in range(n):
        s = _stream_seed(seed, problem.id, j)
        try:
            if disc is not None:
                res = generate(base, disc, prompt, guidance or GuidanceConfig(), seed=s)
            else:
                res = sample_unguided(base, prompt, temperature, max_new_tokens, seed=s)
            outcomes.append(judge(vocab.decode(res.tokens)))
        except Exception as exc:  # a failed sample counts as not passing
            log.warning("problem %s sample %d failed: %s", problem.id, j, exc)
            errors += 1
            outcomes.append(False)
    return EvalRecord.from_outcomes(problem.id, outcomes, errors)


def run_benchmark(problems, base: ModelParameters, vocab: Vocab, n: int = DEFAULT_N,
                  ks=DEFAULT_KS, disc: ModelParameters | None = None,
                  guidance: GuidanceConfig | None = None, seed: int = 0,
                  temperature: float = 0.8, max_new_tokens: int = 256,
                  labeler_factory=_default_factory, workers: int = 1):
    """Per-problem records (in problem order) and the aggregate mean pass@k."""
    ks = tuple(sorted(set(int(k) for k in ks)))
    if any(k < 1 or k > n for k in ks):
        raise ConfigurationError(f"every k must lie in [1, n={n}], got {ks}")
    problems = list(problems)

    def one(problem):
        return evaluate_problem(problem, base, vocab, n, disc, guidance, seed, temperature,
                                max_new_tokens, labeler_factory)

    if workers > 1 and len(problems) > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(one, problems))
    else:
        records = [one(p) for p in problems]
    return records, aggregate(records, ks)


def aggregate(records, ks) -> dict:
    ks = tuple(ks)
    if not records:
        return {"problems": 0, "empty": True, **{f"pass@{k}": None for k in ks}}
    out = {"problems": len(records), "empty": False}
    for k in ks:
        out[f"pass@{k}"] = math.fsum(r.pass_at(k) for r in records) / len(records)
    return out


def report_lines(records, ks) -> list[str]:
    ks = tuple(ks)
    lines = []
    for r in records:
        rec = {"problem": r.problem_id, "n": r.n, "c": r.c, "errors": r.errors}
        rec.update({f"pass@{k}": r.pass_at(k) for k in ks})
        lines.append(json.dumps(rec))
    lines.append(json.dumps({"aggregate": aggregate(records, ks)}))
    return lines


def report_emit(records, ks, path=None) -> str:
    """Per-problem JSON lines followed by one aggregate line; written when ``path`` is set."""
    text = "\n".join(report_lines(records, ks)) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    return text
