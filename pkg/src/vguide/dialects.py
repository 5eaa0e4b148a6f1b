"""Synthetic two-dialect Verilog corpus for small end-to-end steering runs.

Both dialects share one header shape. The POS dialect registers its result
on a clock edge; the NEG dialect drives it with a continuous assignment.
"""

from __future__ import annotations

import numpy as np

from .corpus import SourceFile, UnitKind, VerilogUnit, extract_units
from .model import Control

_PREFIXES = ("alu", "blk", "core", "mix", "unit", "stage", "cell", "path")
_INPUTS = ("a", "b", "x", "z", "din", "src", "lhs", "rhs", "p", "q")
_OUTPUTS = ("y", "out", "dout", "res", "r", "s")
_OPS = ("&", "|", "^", "+", "-")

POS_KEYWORD = "posedge"


def _header(name, a, b, y, width):
    rng_txt = f"[{width}:0] " if width else ""
    return (
        f"module {name}(input logic clk, input logic {rng_txt}{a}, "
        f"input logic {rng_txt}{b}, output logic {rng_txt}{y});\n"
    )


def dialect_module(rng: np.random.Generator, label: Control) -> str:
    name = f"{rng.choice(_PREFIXES)}{int(rng.integers(0, 100))}"
    a, b = rng.choice(_INPUTS, size=2, replace=False)
    y = rng.choice(_OUTPUTS)
    width = int(rng.choice([0, 3, 7, 15]))
    expr = f"{a} {rng.choice(_OPS)} {b}"
    if label is Control.POS:
        body = f"  always @(posedge clk) {y} <= {expr};\n"
    else:
        body = f"  assign {y} = {expr};\n"
    return _header(name, a, b, y, width) + body + "endmodule\n"


def dialect_corpus(n: int, seed: int = 0, pos_fraction: float = 0.5):
    """``n`` labeled module texts, a ``pos_fraction`` share in the POS dialect."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        label = Control.POS if rng.random() < pos_fraction else Control.NEG
        out.append((dialect_module(rng, label), label))
    return out


def dialect_units(texts) -> list[VerilogUnit]:
    units = []
    for i, text in enumerate(texts):
        found = extract_units(SourceFile.from_text(f"dialect/{i}.sv", text))
        units.extend(u for u in found if u.kind is UnitKind.MODULE)
    return units


def is_pos_dialect(text: str) -> bool:
    return POS_KEYWORD in text
