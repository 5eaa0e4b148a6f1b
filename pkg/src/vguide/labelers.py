"""Labelers: external Yosys adapters plus deterministic built-in substitutes.

Every labeler returns a :class:`MetricResult` and never raises for tool or
design problems. Absolute labelers report 1.0 (desired) or 0.0; relative
labelers report a metric where lower is better.
"""

from __future__ import annotations

import enum
import logging
import os
import re
import shutil
import statistics
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from . import kernels
from .errors import ConfigurationError
from .tokenizer import ByteCounter

log = logging.getLogger(__name__)

SYNTAX_TIMEOUT = 60.0
NODES_TIMEOUT = 60.0
SAT_TIMEOUT = 600.0
EQUIV_TIMEOUT = 600.0

# Exact tool scripts; tests snapshot these byte-for-byte.
SYNTAX_SCRIPT = "read_verilog -sv design.sv\nprep\n"
AIG_SCRIPT = "read_verilog -sv design.sv\nproc; aigmap; stat\n"
# chformal -lower turns the $check cells newer Yosys emits for assertions
# into $assert cells the SAT pass can model.
SAT_SCRIPT = (
    "read_verilog -sv -formal design.sv\n"
    "hierarchy; proc; chformal -lower; opt; "
    "sat -verify -seq 100 -tempinduct -prove-asserts\n"
)
EQUIV_SCRIPT = """read_verilog -sv gold.sv
prep -flatten -top {gold_top}
design -stash gold
read_verilog -sv gate.sv
prep -flatten -top {gate_top}
design -stash gate
design -copy-from gold -as gold {gold_top}
design -copy-from gate -as gate {gate_top}
equiv_make gold gate equiv
hierarchy -top equiv
equiv_simple -seq 5
equiv_induct -seq 5
equiv_status -assert
"""
EQY_SCRIPT = """[gold]
read_verilog -sv gold.sv
prep -top {gold_top}

[gate]
read_verilog -sv gate.sv
prep -top {gate_top}
rename {gate_top} {gold_top}

[strategy sby]
use sby
depth 10
engine smtbmc
"""


class Status(str, enum.Enum):
    OK = "ok"
    TOOL_ERROR = "tool_error"
    TIMEOUT = "timeout"
    PARSE_ERROR = "parse_error"


class LabelKind(str, enum.Enum):
    ABSOLUTE = "absolute"
    RELATIVE = "relative"


@dataclass(frozen=True)
class MetricResult:
    status: Status
    value: float | None = None
    raw_output: str = ""
    reason: str = ""

    def __post_init__(self):
        if (self.status is Status.OK) != (self.value is not None):
            raise ValueError("a metric value is present exactly when status is ok")

    @property
    def ok(self) -> bool:
        return self.status is Status.OK

    @property
    def passed(self) -> bool:
        return self.ok and self.value == 1.0


def _fail(status: Status, reason: str, raw: str = "") -> MetricResult:
    return MetricResult(status, None, raw, reason)


@dataclass(frozen=True)
class LabelerSpec:
    name: str
    kind: LabelKind
    command_recipe: str = ""
    timeout: float = SYNTAX_TIMEOUT

    def __post_init__(self):
        if not self.timeout > 0:
            raise ConfigurationError(f"labeler {self.name}: timeout must be positive")


# --- tool plumbing --------------------------------------------------------------

_slots = threading.BoundedSemaphore(max(1, os.cpu_count() or 1))
_slots_lock = threading.Lock()


def set_max_tool_processes(n: int) -> None:
    """Bound concurrent external tool processes across all adapters."""
    global _slots
    if n < 1:
        raise ConfigurationError("max tool processes must be >= 1")
    with _slots_lock:
        _slots = threading.BoundedSemaphore(n)


def find_tool(name: str, env_var: str, candidates) -> str | None:
    explicit = os.environ.get(env_var)
    if explicit:
        return explicit if shutil.which(explicit) or Path(explicit).is_file() else None
    for cand in candidates:
        path = shutil.which(cand)
        if path:
            return path
    return None


def find_yosys(explicit: str | None = None) -> str | None:
    if explicit:
        return explicit if shutil.which(explicit) or Path(explicit).is_file() else None
    return find_tool("yosys", "VGUIDE_YOSYS", ("yosys", "yowasp-yosys"))


def find_eqy(explicit: str | None = None) -> str | None:
    if explicit:
        return explicit if shutil.which(explicit) or Path(explicit).is_file() else None
    return find_tool("eqy", "VGUIDE_EQY", ("eqy", "yowasp-eqy"))


@dataclass(frozen=True)
class ToolRun:
    returncode: int
    output: str
    seconds: float


class ToolMissing(Exception):
    pass


class ToolTimeout(Exception):
    def __init__(self, limit, output=""):
        super().__init__(limit)
        self.limit = limit
        self.output = output


def run_tool(argv, files: dict, timeout: float) -> ToolRun:
    """Run ``argv`` inside a fresh temp workspace holding ``files`` (relative names).

    Paths stay relative because sandboxed tool builds only see their cwd.
    """
    if not argv or argv[0] is None:
        raise ToolMissing("tool binary not configured")
    with tempfile.TemporaryDirectory(prefix="vguide-") as work:
        for name, content in files.items():
            Path(work, name).write_text(content, encoding="utf-8", newline="\n")
        with _slots:
            start = time.perf_counter()
            try:
                proc = subprocess.run(
                    argv, cwd=work, capture_output=True, text=True, errors="replace",
                    timeout=timeout,
                )
            except FileNotFoundError as exc:
                raise ToolMissing(str(exc)) from None
            except subprocess.TimeoutExpired as exc:
                out = exc.stdout or ""
                if isinstance(out, bytes):
                    out = out.decode("utf-8", "replace")
                raise ToolTimeout(timeout, out) from None
            elapsed = time.perf_counter() - start
    return ToolRun(proc.returncode, (proc.stdout or "") + (proc.stderr or ""), elapsed)


# --- stat parsing ---------------------------------------------------------------

_BLOCK = re.compile(r"^===\s*(.+?)\s*===\s*$", re.MULTILINE)
_CELLS_NEW = re.compile(r"^\s*(\d+)\s+cells\s*$", re.MULTILINE)
_CELLS_OLD = re.compile(r"^\s*Number of cells:\s*(\d+)\s*$", re.MULTILINE)
_AND_NEW = re.compile(r"^\s*(\d+)\s+\$_AND_\s*$", re.MULTILINE)
_AND_OLD = re.compile(r"^\s*\$_AND_\s+(\d+)\s*$", re.MULTILINE)
_WIRES = re.compile(r"^\s*(?:\d+\s+wires|Number of wires:\s*\d+)\s*$", re.MULTILINE)


def parse_stat(output: str) -> tuple[int, int]:
    """(total cells, $_AND_ cells) summed over the per-module stat blocks.

    Handles both the tabular layout of recent Yosys releases and the older
    ``Number of cells:`` layout. Raises ValueError when no block parses.
    """
    marks = list(_BLOCK.finditer(output))
    cells = ands = 0
    found = False
    for i, m in enumerate(marks):
        if m.group(1).strip().lower() == "design hierarchy":
            continue  # a hierarchy summary repeats the per-module totals
        end = marks[i + 1].start() if i + 1 < len(marks) else len(output)
        block = output[m.end() : end]
        c = _CELLS_NEW.search(block) or _CELLS_OLD.search(block)
        if c is None:
            # recent releases omit the cells line for a cell-free module
            if _WIRES.search(block):
                found = True
            continue
        found = True
        cells += int(c.group(1))
        a = _AND_NEW.search(block) or _AND_OLD.search(block)
        ands += int(a.group(1)) if a else 0
    if not found:
        raise ValueError("no cell count in stat output")
    return cells, ands


# --- design helpers ---------------------------------------------------------------

_MODULE_NAME = re.compile(r"\b(?:module|macromodule)\s+(?:automatic\s+|static\s+)?([A-Za-z_][\w$]*)")
_DIRECTION = re.compile(r"\b(input|output|inout)\b")
_PORT_NOISE = {"wire", "reg", "logic", "signed", "unsigned", "var", "tri", "integer", "bit"}


def top_module_name(text: str) -> str | None:
    """Name of the last module in the text (the usual top in single-file designs)."""
    names = _MODULE_NAME.findall(kernels.strip_comments(text))
    return names[-1] if names else None


def port_signature(text: str) -> frozenset:
    """(direction, name) pairs declared in the top module (ANSI or body style)."""
    stripped = kernels.strip_comments(text)
    starts = [m.start() for m in _MODULE_NAME.finditer(stripped)]
    if starts:
        stripped = stripped[starts[-1]:]
    ports = set()
    marks = list(_DIRECTION.finditer(stripped))
    for i, m in enumerate(marks):
        stop = marks[i + 1].start() if i + 1 < len(marks) else len(stripped)
        seg = stripped[m.end() : stop]
        cut = min((j for j in (seg.find(";"), seg.find(")")) if j != -1), default=len(seg))
        seg = re.sub(r"\[[^\]]*\]", " ", seg[:cut])
        for word in re.findall(r"[A-Za-z_][\w$]*", seg):
            if word not in _PORT_NOISE:
                ports.add((m.group(1), word))
    return frozenset(ports)


def has_assertion(text: str) -> bool:
    return re.search(r"\bassert\b", kernels.strip_comments(text)) is not None


# --- labelers --------------------------------------------------------------------


class Labeler:
    spec: LabelerSpec

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def kind(self) -> LabelKind:
        return self.spec.kind

    def available(self) -> bool:
        return True

    def run(self, text: str) -> MetricResult:
        raise NotImplementedError


class YosysLabeler(Labeler):
    def __init__(self, binary: str | None = None, timeout: float | None = None):
        self.binary = find_yosys(binary)
        if timeout is not None:
            self.spec = LabelerSpec(self.spec.name, self.spec.kind, self.spec.command_recipe,
                                    timeout)

    def available(self) -> bool:
        return self.binary is not None

    def _invoke(self, files: dict, script: str):
        """ToolRun, or a failed MetricResult for a missing tool or a timeout."""
        if self.binary is None:
            return _fail(Status.TOOL_ERROR, "tool not found: yosys (set VGUIDE_YOSYS)")
        files = dict(files, **{"script.ys": script})
        try:
            return run_tool([self.binary, "-q", "-s", "script.ys"], files, self.spec.timeout)
        except ToolMissing as exc:
            return _fail(Status.TOOL_ERROR, f"tool not found: {exc}")
        except ToolTimeout as exc:
            return _fail(Status.TIMEOUT, f"timed out after {exc.limit:g} s", exc.output)


class YosysSyntax(YosysLabeler):
    """1.0 iff the design reads and survives ``prep``."""

    spec = LabelerSpec("yosys-syntax", LabelKind.ABSOLUTE, SYNTAX_SCRIPT, SYNTAX_TIMEOUT)

    def run(self, text: str) -> MetricResult:
        res = self._invoke({"design.sv": text}, SYNTAX_SCRIPT)
        if isinstance(res, MetricResult):
            return res
        return MetricResult(Status.OK, 1.0 if res.returncode == 0 else 0.0, res.output)


class YosysAigNodes(YosysLabeler):
    """Cell count after ``aigmap``; ``and_only`` counts just the $_AND_ gates."""

    spec = LabelerSpec("aig-nodes", LabelKind.RELATIVE, AIG_SCRIPT, NODES_TIMEOUT)

    def __init__(self, binary=None, timeout=None, and_only: bool = False):
        super().__init__(binary, timeout)
        self.and_only = and_only
        if and_only:
            self.spec = LabelerSpec("aig-and", LabelKind.RELATIVE, AIG_SCRIPT, self.spec.timeout)

    def run(self, text: str) -> MetricResult:
        # -q would hide the stat tables, so run without it
        if self.binary is None:
            return _fail(Status.TOOL_ERROR, "tool not found: yosys (set VGUIDE_YOSYS)")
        try:
            res = run_tool([self.binary, "-s", "script.ys"],
                           {"design.sv": text, "script.ys": AIG_SCRIPT}, self.spec.timeout)
        except ToolMissing as exc:
            return _fail(Status.TOOL_ERROR, f"tool not found: {exc}")
        except ToolTimeout as exc:
            return _fail(Status.TIMEOUT, f"timed out after {exc.limit:g} s", exc.output)
        if res.returncode != 0:
            return _fail(Status.TOOL_ERROR, "yosys exited with an error", res.output)
        try:
            cells, ands = parse_stat(res.output)
        except ValueError as exc:
            return _fail(Status.PARSE_ERROR, str(exc), res.output)
        return MetricResult(Status.OK, float(ands if self.and_only else cells), res.output)


class YosysSatRuntime(YosysLabeler):
    """Median wall-clock seconds of a temporal-induction proof over ``repeats`` runs."""

    spec = LabelerSpec("sat-runtime", LabelKind.RELATIVE, SAT_SCRIPT, SAT_TIMEOUT)

    def __init__(self, binary=None, timeout=None, repeats: int = 3):
        super().__init__(binary, timeout)
        if repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        self.repeats = repeats

    def run(self, text: str) -> MetricResult:
        if not has_assertion(text):
            return _fail(Status.TOOL_ERROR, "precondition: design contains no assertion")
        times, out = [], ""
        for _ in range(self.repeats):
            res = self._invoke({"design.sv": text}, SAT_SCRIPT)
            if isinstance(res, MetricResult):
                return res
            out = res.output
            if res.returncode != 0:
                return _fail(Status.TOOL_ERROR, "proof failed or tool error", out)
            times.append(res.seconds)
        return MetricResult(Status.OK, float(statistics.median(times)), out)


class YosysEquivalence(YosysLabeler):
    """1.0 iff the candidate is proven equivalent to the fixed reference.

    Uses eqy when it is installed, otherwise the native equiv_* passes.
    """

    spec = LabelerSpec("equivalence", LabelKind.ABSOLUTE, EQUIV_SCRIPT, EQUIV_TIMEOUT)

    def __init__(self, reference: str, binary=None, timeout=None, eqy: str | None = None,
                 use_eqy: bool | None = None):
        super().__init__(binary, timeout)
        self.reference = reference
        self.eqy = find_eqy(eqy) if use_eqy is not False else None

    def available(self) -> bool:
        return self.binary is not None or self.eqy is not None

    def run(self, text: str) -> MetricResult:
        gold_top, gate_top = top_module_name(self.reference), top_module_name(text)
        if gold_top is None or gate_top is None:
            return _fail(Status.TOOL_ERROR, "no module found in candidate or reference")
        if port_signature(self.reference) != port_signature(text):
            return _fail(Status.TOOL_ERROR, "interface mismatch between candidate and reference")
        files = {"gold.sv": self.reference, "gate.sv": text}
        if self.eqy is not None:
            files["check.eqy"] = EQY_SCRIPT.format(gold_top=gold_top, gate_top=gate_top)
            try:
                res = run_tool([self.eqy, "-f", "check.eqy"], files, self.spec.timeout)
            except ToolMissing as exc:
                return _fail(Status.TOOL_ERROR, f"tool not found: {exc}")
            except ToolTimeout as exc:
                return _fail(Status.TIMEOUT, f"timed out after {exc.limit:g} s", exc.output)
        else:
            res = self._invoke(files, EQUIV_SCRIPT.format(gold_top=gold_top, gate_top=gate_top))
            if isinstance(res, MetricResult):
                return res
        return MetricResult(Status.OK, 1.0 if res.returncode == 0 else 0.0, res.output)


# --- built-ins -------------------------------------------------------------------

_PAIRS = (
    ("module", "endmodule"), ("macromodule", "endmodule"), ("function", "endfunction"),
    ("task", "endtask"), ("case", "endcase"), ("casex", "endcase"), ("casez", "endcase"),
    ("generate", "endgenerate"), ("begin", "end"), ("fork", "join"),
)
_OPEN = {o: c for o, c in _PAIRS}
_CLOSE_WORDS = {"endmodule", "endfunction", "endtask", "endcase", "endgenerate", "end",
                "join", "join_any", "join_none"}
_WORD_OR_BRACKET = re.compile(r"[A-Za-z_][\w$]*|[()\[\]{}]")
_BRACKETS = {"(": ")", "[": "]", "{": "}"}


def balanced_structure(text: str) -> bool:
    """Offline syntax proxy: at least one module and properly nested keyword/bracket pairs."""
    stripped = kernels.strip_comments(text)
    stack = []
    saw_module = False
    for tok in _WORD_OR_BRACKET.findall(stripped):
        if tok in _BRACKETS:
            stack.append(_BRACKETS[tok])
        elif tok in _OPEN:
            saw_module |= tok in ("module", "macromodule")
            stack.append(_OPEN[tok])
        elif tok in (")", "]", "}") or tok in _CLOSE_WORDS:
            want = "join" if tok in ("join_any", "join_none") else tok
            if not stack or stack.pop() != want:
                return False
    return saw_module and not stack


class BuiltinSyntax(Labeler):
    spec = LabelerSpec("builtin-syntax", LabelKind.ABSOLUTE)

    def run(self, text: str) -> MetricResult:
        return MetricResult(Status.OK, 1.0 if balanced_structure(text) else 0.0)


class KeywordLabeler(Labeler):
    """1.0 iff the regex matches outside comments and string literals."""

    def __init__(self, pattern: str):
        self.pattern = re.compile(pattern)
        self.spec = LabelerSpec(f"keyword:{pattern}", LabelKind.ABSOLUTE)

    def run(self, text: str) -> MetricResult:
        hit = self.pattern.search(kernels.strip_comments(text)) is not None
        return MetricResult(Status.OK, 1.0 if hit else 0.0)


class LengthLabeler(Labeler):
    """Relative labeler whose metric is the token count.

    With a ``threshold`` and no reference, callers may treat count < threshold
    as desired via :meth:`below_threshold`.
    """

    def __init__(self, tokenizer=None, threshold: float | None = None):
        self.tokenizer = tokenizer if tokenizer is not None else ByteCounter()
        self.threshold = threshold
        self.spec = LabelerSpec("length", LabelKind.RELATIVE)

    def run(self, text: str) -> MetricResult:
        return MetricResult(Status.OK, float(self.tokenizer.token_count(text)))

    def below_threshold(self, result: MetricResult) -> bool:
        if self.threshold is None:
            raise ConfigurationError("length labeler has no threshold")
        return result.ok and result.value < self.threshold


class CallableLabeler(Labeler):
    """Wrap a plain ``text -> MetricResult`` function (tests and toy checkers)."""

    def __init__(self, name: str, fn, kind: LabelKind = LabelKind.ABSOLUTE):
        self.fn = fn
        self.spec = LabelerSpec(name, LabelKind(kind))

    def run(self, text: str) -> MetricResult:
        try:
            return self.fn(text)
        except Exception as exc:  # a checker bug must not take the batch down
            return _fail(Status.TOOL_ERROR, f"checker raised {type(exc).__name__}: {exc}")


def syntax_checker(binary: str | None = None, prefer_tool: bool = True) -> Labeler:
    """Yosys syntax check when the tool is present, else the built-in fallback."""
    if prefer_tool:
        tool = YosysSyntax(binary)
        if tool.available():
            return tool
    return BuiltinSyntax()


LABELER_NAMES = ("syntax", "yosys-syntax", "builtin-syntax", "aig-nodes", "aig-and",
                 "sat-runtime", "equivalence", "keyword:<regex>", "length")


def get_labeler(name: str, reference: str | None = None, tokenizer=None,
                binary: str | None = None, timeout: float | None = None) -> Labeler:
    """Labeler by registry name; see ``LABELER_NAMES``."""
    if name.startswith("keyword:"):
        return KeywordLabeler(name[len("keyword:"):])
    if name == "syntax":
        return syntax_checker(binary)
    if name == "builtin-syntax":
        return BuiltinSyntax()
    if name == "yosys-syntax":
        return YosysSyntax(binary, timeout)
    if name == "aig-nodes":
        return YosysAigNodes(binary, timeout)
    if name == "aig-and":
        return YosysAigNodes(binary, timeout, and_only=True)
    if name == "sat-runtime":
        return YosysSatRuntime(binary, timeout)
    if name == "equivalence":
        if reference is None:
            raise ConfigurationError("the equivalence labeler needs a reference design")
        return YosysEquivalence(reference, binary, timeout)
    if name == "length":
        return LengthLabeler(tokenizer)
    raise ConfigurationError(f"unknown labeler {name!r}; known: {', '.join(LABELER_NAMES)}")
