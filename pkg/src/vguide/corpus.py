"""Verilog corpus mining: scan trees, extract modules/functions, split, filter, pair."""

from __future__ import annotations

import enum
import json
import logging
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import kernels
from .errors import ConfigurationError

log = logging.getLogger(__name__)

VERILOG_SUFFIXES = (".v", ".sv", ".vh", ".svh")
DEFAULT_MIN_LINES = 4
DEFAULT_MAX_LINES = 10000
DEFAULT_MAX_TOKENS = 1024

IDENTIFIER = re.compile(r"[A-Za-z_][A-Za-z0-9_$]*")
_KEYWORDS = re.compile(r"\b(module|macromodule|endmodule|function|endfunction)\b")
_OPENERS = {"module": "module", "macromodule": "module", "function": "function"}
_CLOSERS = {"endmodule": "module", "endfunction": "function"}
_NAME_SKIP = {
    "automatic", "static", "signed", "unsigned", "integer", "real", "realtime",
    "time", "reg", "logic", "bit", "byte", "shortint", "int", "longint", "void",
    "wire", "virtual", "pure", "extern",
}
_PORT_DECL = re.compile(r"\s*\b(input|output|inout)\b")


class UnitKind(str, enum.Enum):
    MODULE = "module"
    FUNCTION = "function"


class Task(str, enum.Enum):
    V2C = "v2c"
    C2V = "c2v"
    AUTOCOMPLETE = "autocomplete"
    REWRITE = "rewrite"


# Every instruction template lives here; answers never get extra prose.
TEMPLATES = {
    Task.AUTOCOMPLETE: "Complete the Verilog module.\n{definition}\n",
    Task.V2C: "Translate the Verilog into C.\n{verilog}\n",
    Task.C2V: "Translate the C into Verilog.\n{c_program}\n",
    Task.REWRITE: (
        "Rewrite the Verilog module to keep the same function but {goal}.\n{verilog}\n"
    ),
}
REWRITE_GOALS = {
    "nodes": "less nodes after synthesis",
    "sat": "less Boolean Satisfiability (SAT) solving time",
}


@dataclass(frozen=True)
class SourceFile:
    path: str
    content: str
    line_count: int

    @classmethod
    def from_text(cls, path, content: str) -> "SourceFile":
        return cls(str(path), content, count_lines(content))


def count_lines(text: str) -> int:
    if not text:
        return 0
    return text.count("\n") + (0 if text.endswith("\n") else 1)


@dataclass(frozen=True)
class VerilogUnit:
    kind: UnitKind
    name: str
    definition: str
    body: str
    source_path: str = ""
    token_count: int | None = None
    malformed: bool = False

    @property
    def full_text(self) -> str:
        return self.definition + self.body

    def to_record(self) -> dict:
        return {
            "kind": self.kind.value,
            "name": self.name,
            "definition": self.definition,
            "body": self.body,
            "full_text": self.full_text,
            "token_count": self.token_count,
            "source_path": self.source_path,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "VerilogUnit":
        unit = cls(
            UnitKind(rec["kind"]),
            rec["name"],
            rec["definition"],
            rec["body"],
            rec.get("source_path", ""),
            rec.get("token_count"),
        )
        if "full_text" in rec and rec["full_text"] != unit.full_text:
            raise ValueError(f"record for {unit.name}: definition + body != full_text")
        return unit


@dataclass(frozen=True)
class TranslationPair:
    verilog: VerilogUnit
    c_program: str

    def __post_init__(self):
        if not self.c_program.strip():
            raise ValueError(f"empty C translation for {self.verilog.name}")


@dataclass(frozen=True)
class InstructionExample:
    instruction: str
    answer: str
    task: Task

    def __post_init__(self):
        if not self.instruction or not self.answer:
            raise ValueError("instruction and answer must be non-empty")

    def to_record(self) -> dict:
        return {"task": self.task.value, "instruction": self.instruction, "answer": self.answer}

    @classmethod
    def from_record(cls, rec: dict) -> "InstructionExample":
        return cls(rec["instruction"], rec["answer"], Task(rec["task"]))


@dataclass
class ScanReport:
    """Tallies from a scan/extract run (what was skipped and why)."""

    files_seen: int = 0
    files_kept: int = 0
    skipped_unreadable: list = field(default_factory=list)
    skipped_line_bounds: int = 0
    dangling: list = field(default_factory=list)
    malformed: list = field(default_factory=list)
    syntax_rejected: list = field(default_factory=list)
    syntax_checker: str = ""


# --- scanning -----------------------------------------------------------------


def scan_tree(root, min_lines: int = DEFAULT_MIN_LINES, max_lines: int = DEFAULT_MAX_LINES,
              report: ScanReport | None = None) -> list[SourceFile]:
    """Verilog/SystemVerilog files under ``root`` within the line bounds, sorted by path."""
    root = Path(root)
    if not root.is_dir():
        raise OSError(f"cannot read directory {root}")
    os.listdir(root)  # surfaces permission errors on the root itself
    report = report if report is not None else ScanReport()
    paths = sorted(
        (p for p in root.rglob("*") if p.suffix.lower() in VERILOG_SUFFIXES and p.is_file()),
        key=lambda p: p.as_posix(),
    )
    files = []
    for path in paths:
        report.files_seen += 1
        try:
            content = path.read_bytes().decode("utf-8", errors="replace")
        except OSError as exc:
            report.skipped_unreadable.append((str(path), str(exc)))
            continue
        sf = SourceFile.from_text(path, content)
        if min_lines <= sf.line_count <= max_lines:
            files.append(sf)
            report.files_kept += 1
        else:
            report.skipped_line_bounds += 1
    return files


def strip_comments(text: str) -> str:
    """Comments and string literals blanked to spaces; offsets and newlines kept."""
    return kernels.strip_comments(text)


# --- extraction ---------------------------------------------------------------


def _unit_name(kind: str, stripped: str, start: int, stop: int) -> str | None:
    """Identifier naming the unit whose keyword ends at ``start``."""
    head = stripped[start:stop]
    cut = len(head)
    for ch in "(;#":
        j = head.find(ch)
        if j != -1:
            cut = min(cut, j)
    head = re.sub(r"\[[^\]]*\]", " ", head[:cut])
    words = IDENTIFIER.findall(head)
    if kind == "module":
        words = [w for w in words if w not in ("automatic", "static")]
        return words[0] if words else None
    words = [w for w in words if w not in _NAME_SKIP]
    return words[-1] if words else None


def _header_end(stripped: str, start: int, stop: int) -> int | None:
    """Offset just past the ';' closing the header (paren depth 0)."""
    depth = 0
    for i in range(start, stop):
        ch = stripped[i]
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
        elif ch == ";" and depth == 0:
            return i + 1
    return None


def _definition_end(stripped: str, header_end: int, stop: int) -> int:
    """Extend past contiguous leading input/output/inout declarations."""
    end = header_end
    while True:
        m = _PORT_DECL.match(stripped, end, stop)
        if not m:
            break
        semi = stripped.find(";", m.end(), stop)
        if semi == -1:
            break
        end = semi + 1
    # keep the rest of that line (whitespace or a trailing comment) in the definition
    nl = stripped.find("\n", end, stop)
    if nl != -1 and not stripped[end:nl].strip():
        end = nl + 1
    return end


def split_definition_body(text: str, kind: UnitKind | str = UnitKind.MODULE):
    """Split unit text into (definition, body); raises ValueError when malformed."""
    kind = UnitKind(kind)
    stripped = strip_comments(text)
    m = _KEYWORDS.search(stripped)
    if not m or _OPENERS.get(m.group(1)) != kind.value:
        raise ValueError(f"text does not start a {kind.value}")
    head_end = _header_end(stripped, m.end(), len(stripped))
    if head_end is None:
        raise ValueError(f"no ';' closes the {kind.value} header")
    cut = _definition_end(stripped, head_end, len(stripped))
    return text[:cut], text[cut:]


def extract_units(file: SourceFile, report: ScanReport | None = None) -> list[VerilogUnit]:
    """Balanced module/function regions in source order (by start offset).

    Modules cannot nest, so a ``module`` seen while one is open marks the
    earlier one dangling. Functions may sit inside modules; both are emitted.
    Dangling or stray keywords are reported and never emitted.
    """
    report = report if report is not None else ScanReport()
    text = file.content
    stripped = strip_comments(text)
    stack = []  # (kind, start offset, keyword end)
    spans = []
    for m in _KEYWORDS.finditer(stripped):
        word = m.group(1)
        if word in _OPENERS:
            kind = _OPENERS[word]
            if kind == "module":
                while stack:
                    k, s, _ = stack.pop()
                    report.dangling.append((file.path, k, s))
            stack.append((kind, m.start(), m.end()))
        else:
            kind = _CLOSERS[word]
            while stack and stack[-1][0] != kind:
                k, s, _ = stack.pop()
                report.dangling.append((file.path, k, s))
            if not stack:
                report.dangling.append((file.path, "end" + kind, m.start()))
                continue
            k, s, kw_end = stack.pop()
            spans.append((s, m.end(), k, kw_end))
    for k, s, _ in stack:
        report.dangling.append((file.path, k, s))

    units = []
    for start, stop, kind, kw_end in sorted(spans):
        full = text[start:stop]
        name = _unit_name(kind, stripped, kw_end, stop)
        try:
            definition, body = split_definition_body(full, kind)
        except ValueError as exc:
            report.malformed.append((file.path, name, str(exc)))
            definition, body, bad = full, "", True
        else:
            bad = False
        if name is None or not IDENTIFIER.fullmatch(name):
            report.malformed.append((file.path, name, "no legal identifier"))
            name, bad = name or "", True
        units.append(VerilogUnit(UnitKind(kind), name, definition, body, file.path, None, bad))
    return units


# --- filters ------------------------------------------------------------------


def filter_by_tokens(units, tokenizer, max_tokens: int = DEFAULT_MAX_TOKENS) -> list[VerilogUnit]:
    """Units whose token count is at most ``max_tokens``, with the count recorded."""
    kept = []
    for u in units:
        n = tokenizer.token_count(u.full_text)
        if n <= max_tokens:
            kept.append(replace(u, token_count=n))
    return kept


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


def dedup(units) -> list[VerilogUnit]:
    """Drop later units whose whitespace-normalized text was already seen."""
    seen = set()
    out = []
    for u in units:
        key = normalize_whitespace(u.full_text)
        if key not in seen:
            seen.add(key)
            out.append(u)
    return out


def syntax_filter_units(units, checker, report: ScanReport | None = None):
    """Keep units the checker accepts; ``checker`` is a labelers syntax labeler."""
    report = report if report is not None else ScanReport()
    report.syntax_checker = getattr(checker, "name", str(checker))
    kept = []
    for u in units:
        if u.kind is UnitKind.FUNCTION:
            # a bare function is not a compilable design; wrap it for the check
            probe = f"module __probe;\n{u.full_text}\nendmodule\n"
        else:
            probe = u.full_text
        result = checker.run(probe)
        if result.ok and result.value == 1.0:
            kept.append(u)
        else:
            why = "syntax error" if result.ok else f"{result.status.value}: {result.reason}"
            report.syntax_rejected.append((u.source_path, u.name, why))
    return kept


# --- instruction pairs ---------------------------------------------------------


def autocomplete_prompt(definition: str) -> str:
    return TEMPLATES[Task.AUTOCOMPLETE].format(definition=definition.rstrip("\n"))


def rewrite_prompt(verilog: str, goal: str = "nodes") -> str:
    return TEMPLATES[Task.REWRITE].format(
        goal=REWRITE_GOALS.get(goal, goal), verilog=verilog.rstrip("\n")
    )


def build_instruction_pairs(units, translations=(), tasks=(Task.AUTOCOMPLETE,)):
    """Instruction/answer examples for each requested task, unit order first."""
    tasks = {Task(t) for t in tasks}
    translations = list(translations)
    if tasks & {Task.V2C, Task.C2V} and not translations and units:
        raise ConfigurationError("v2c/c2v pairs need C translations (none supplied)")
    if Task.REWRITE in tasks:
        raise ConfigurationError(
            "rewrite examples need (reference, improved) pairs; build them from labeled data"
        )
    out = []
    if Task.AUTOCOMPLETE in tasks:
        for u in units:
            if u.malformed:
                continue
            out.append(InstructionExample(autocomplete_prompt(u.definition), u.full_text,
                                          Task.AUTOCOMPLETE))
    if Task.V2C in tasks:
        for tp in translations:
            out.append(InstructionExample(
                TEMPLATES[Task.V2C].format(verilog=tp.verilog.full_text.rstrip("\n")),
                tp.c_program, Task.V2C))
    if Task.C2V in tasks:
        for tp in translations:
            out.append(InstructionExample(
                TEMPLATES[Task.C2V].format(c_program=tp.c_program.rstrip("\n")),
                tp.verilog.full_text, Task.C2V))
    return out


def load_translations(units, c_dir, tokenizer=None, max_tokens=None) -> list[TranslationPair]:
    """Pair units with ``<c_dir>/<unit name>.c`` files produced by an external translator."""
    c_dir = Path(c_dir)
    pairs = []
    for u in units:
        path = c_dir / f"{u.name}.c"
        if not path.is_file():
            continue
        c_text = path.read_text(encoding="utf-8", errors="replace")
        if not c_text.strip():
            continue
        if tokenizer is not None and max_tokens is not None:
            if tokenizer.token_count(c_text) > max_tokens:
                continue
        pairs.append(TranslationPair(u, c_text))
    return pairs


# --- pipeline & files ----------------------------------------------------------


def process_tree(root, tokenizer, min_lines=DEFAULT_MIN_LINES, max_lines=DEFAULT_MAX_LINES,
                 max_tokens=DEFAULT_MAX_TOKENS, checker=None, workers: int = 1,
                 report: ScanReport | None = None):
    """scan -> extract -> drop malformed -> token filter -> dedup -> syntax filter."""
    report = report if report is not None else ScanReport()
    files = scan_tree(root, min_lines, max_lines, report)
    if workers > 1 and len(files) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_extract_with_report, files))  # keeps path order
    else:
        results = [_extract_with_report(f) for f in files]
    units = []
    for found, sub in results:
        units.extend(found)
        report.dangling.extend(sub.dangling)
        report.malformed.extend(sub.malformed)
    units = [u for u in units if not u.malformed]
    units = filter_by_tokens(units, tokenizer, max_tokens)
    units = dedup(units)
    if checker is not None:
        units = syntax_filter_units(units, checker, report)
    return units, report


def _extract_with_report(file):
    sub = ScanReport()
    return extract_units(file, sub), sub


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_corpus(units, path) -> None:
    write_jsonl((u.to_record() for u in units), path)


def read_corpus(path) -> list[VerilogUnit]:
    return [VerilogUnit.from_record(r) for r in read_jsonl(path)]
