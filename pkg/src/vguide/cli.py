"""Command-line entry point: ``vguide <subcommand> ...``.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import load_config, parse_ks
from .errors import VGuideError

log = logging.getLogger("vguide")

# flag dest -> (section, key); only flags actually given override lower layers
_SETTINGS = {
    "seed": ("run", "seed"),
    "log_level": ("run", "log_level"),
    "yosys": ("paths", "yosys"),
    "eqy": ("paths", "eqy"),
    "min_lines": ("corpus", "min_lines"),
    "max_lines": ("corpus", "max_lines"),
    "max_tokens": ("corpus", "max_tokens"),
    "workers": None,  # resolved per subcommand below
    "size": ("tokenizer", "vocab_size"),
    "context_length": ("model", "context_length"),
    "embed_dim": ("model", "embed_dim"),
    "num_layers": ("model", "num_layers"),
    "num_heads": ("model", "num_heads"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr_init": ("train", "lr_init"),
    "lr_min": ("train", "lr_min"),
    "beta1": ("train", "beta1"),
    "beta2": ("train", "beta2"),
    "lam": ("train", "lam"),
    "grad_clip": ("train", "grad_clip"),
    "heldout_fraction": ("train", "heldout_fraction"),
    "w": ("guidance", "w"),
    "rho": ("guidance", "rho"),
    "tau": ("guidance", "tau"),
    "max_new_tokens": ("guidance", "max_new_tokens"),
    "rank_by": ("guidance", "rank_by"),
    "ks": ("eval", "ks"),
}
_WORKERS = {"extract": "corpus", "augment": "augment", "eval": "eval"}
_TEMPERATURE = {"generate": "guidance", "augment": "augment"}


def _add_common(p):
    p.add_argument("--config", help="INI config file (sections per module)")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING")


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--context-length", dest="context_length", type=int)
    g.add_argument("--embed-dim", dest="embed_dim", type=int)
    g.add_argument("--num-layers", dest="num_layers", type=int)
    g.add_argument("--num-heads", dest="num_heads", type=int)


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr-init", dest="lr_init", type=float)
    g.add_argument("--lr-min", dest="lr_min", type=float)
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--grad-clip", dest="grad_clip", type=float)
    g.add_argument("--log", help="training log output (JSON lines)")
    g.add_argument("--init", help="checkpoint to start from")


def _add_guidance_flags(p, with_disc=True):
    g = p.add_argument_group("guidance")
    if with_disc:
        g.add_argument("--disc", help="discriminator checkpoint (enables guidance)")
    g.add_argument("--w", type=float, help="guidance weight (>= 0)")
    g.add_argument("--rho", type=float, help="cumulative-mass threshold in (0, 1]")
    g.add_argument("--tau", type=float, help="posterior threshold in [0, 1]")
    g.add_argument("--rank-by", dest="rank_by", choices=("posterior", "weighted"))
    g.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vguide",
        description="Controllable Verilog generation with a generative discriminator.",
    )
    parser.add_argument("--version", action="version", version=f"vguide {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("extract", help="mine modules/functions from a source tree")
    _add_common(p)
    p.add_argument("--root", required=True, help="directory of .v/.sv files")
    p.add_argument("--out", required=True, help="corpus output (JSON lines)")
    p.add_argument("--min-lines", dest="min_lines", type=int)
    p.add_argument("--max-lines", dest="max_lines", type=int)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("--vocab", help="vocab for token counts (default: one token per byte)")
    p.add_argument("--c-dir", dest="c_dir", help="directory of <unit>.c translations")
    p.add_argument("--tasks", default="autocomplete",
                   help="comma list of autocomplete,v2c,c2v (default autocomplete)")
    p.add_argument("--pairs-out", dest="pairs_out",
                   help="instruction pairs output (default: <out>.pairs.jsonl)")
    p.add_argument("--syntax", choices=("auto", "yosys", "builtin", "none"), default="auto",
                   help="syntax filter checker")
    p.add_argument("--yosys", help="yosys binary")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("build-vocab", help="train the byte-level BPE vocabulary")
    _add_common(p)
    p.add_argument("--corpus", required=True, nargs="+", help="JSON-lines corpus/pair/label files")
    p.add_argument("--size", type=int, help="target vocabulary size")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-lm", help="instruction-tune the generator")
    _add_common(p)
    p.add_argument("--data", required=True, help="pairs file, or a corpus file (autocomplete)")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="checkpoint output")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("train-disc", help="train the class-conditional discriminator")
    _add_common(p)
    p.add_argument("--data", required=True, help="labeled file {text, label}")
    p.add_argument("--heldout", help="labeled held-out file (default: split off a fraction)")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lam", type=float, help="generative weight lambda in [0, 1]")
    p.add_argument("--heldout-fraction", dest="heldout_fraction", type=float)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("generate", help="sample completions, optionally guided")
    _add_common(p)
    p.add_argument("--base", required=True, help="generator checkpoint")
    p.add_argument("--vocab", required=True)
    p.add_argument("--prompt", required=True, help="prompt text file")
    p.add_argument("--definition", action="store_true",
                   help="treat the prompt file as a module definition to autocomplete")
    p.add_argument("--temperature", type=float)
    p.add_argument("--n", type=int, default=1, help="number of samples")
    p.add_argument("--out", help="samples output (JSON lines; default stdout)")
    p.add_argument("--trace", help="per-step guidance trace output (JSON lines)")
    _add_guidance_flags(p)

    p = sub.add_parser("augment", help="complete heads, syntax-filter and label")
    _add_common(p)
    p.add_argument("--heads", required=True, help="corpus JSON lines or a Verilog file")
    p.add_argument("--base", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--n", type=int, default=4, help="samples per head")
    p.add_argument("--temperature", type=float)
    p.add_argument("--labeler", required=True, help="labeler name, e.g. syntax, aig-nodes")
    p.add_argument("--reference", help="reference design for relative labelers")
    p.add_argument("--syntax", choices=("auto", "yosys", "builtin"), default="auto")
    p.add_argument("--out", required=True)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
    p.add_argument("--yosys", help="yosys binary")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("eval", help="pass@k over a problem directory")
    _add_common(p)
    p.add_argument("--problems", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--labeler", help="override every problem's checker")
    p.add_argument("--n", type=int, help="samples per problem")
    p.add_argument("--k", dest="ks", help="comma list of k values")
    p.add_argument("--temperature", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--yosys", help="yosys binary")
    p.add_argument("--workers", type=int)
    _add_guidance_flags(p)
    return parser


def _resolve(args):
    flags = {}
    for dest, target in _SETTINGS.items():
        if target is None or not hasattr(args, dest):
            continue
        flags[target] = getattr(args, dest)
    if getattr(args, "workers", None) is not None and args.command in _WORKERS:
        flags[(_WORKERS[args.command], "workers")] = args.workers
    if getattr(args, "temperature", None) is not None and args.command in _TEMPERATURE:
        flags[(_TEMPERATURE[args.command], "temperature")] = args.temperature
    if args.command == "eval" and getattr(args, "n", None) is not None:
        flags[("eval", "n")] = args.n
    return load_config(getattr(args, "config", None), flags=flags)


# --- helpers ---------------------------------------------------------------------


def _read_jsonl(path):
    from .corpus import read_jsonl

    return read_jsonl(path)


def _load_vocab(path):
    from .tokenizer import Vocab

    return Vocab.load(path)


def _model_config(cfg, vocab):
    from .model import ModelConfig

    m = cfg.section("model")
    return ModelConfig(vocab_size=vocab.size, seed=cfg.get("run", "seed"), **m)


def _train_config(cfg, **over):
    from .training import TrainConfig

    t = cfg.section("train")
    t.update(over)
    return TrainConfig(seed=cfg.get("run", "seed"), **t)


def _guidance_config(cfg):
    from .guidance import GuidanceConfig

    return GuidanceConfig(**cfg.section("guidance"))


def _yosys(cfg):
    return cfg.get("paths", "yosys") or None


def _syntax_checker(choice, cfg):
    from .labelers import BuiltinSyntax, YosysSyntax, syntax_checker

    if choice == "none":
        return None
    if choice == "builtin":
        return BuiltinSyntax()
    if choice == "yosys":
        tool = YosysSyntax(_yosys(cfg), cfg.get("labelers", "syntax_timeout"))
        if not tool.available():
            raise VGuideError("yosys requested for the syntax filter but not found")
        return tool
    return syntax_checker(_yosys(cfg))


def _make_labeler(name, cfg, reference=None, tokenizer=None):
    from . import labelers as lb

    lb.set_max_tool_processes(cfg.get("labelers", "max_processes"))
    timeouts = {
        "yosys-syntax": "syntax_timeout", "syntax": "syntax_timeout",
        "aig-nodes": "nodes_timeout", "aig-and": "nodes_timeout",
        "sat-runtime": "sat_timeout", "equivalence": "equiv_timeout",
    }
    timeout = cfg.get("labelers", timeouts[name]) if name in timeouts else None
    if name == "sat-runtime":
        return lb.YosysSatRuntime(_yosys(cfg), timeout, cfg.get("labelers", "sat_repeats"))
    if name != "equivalence":
        reference = None
    return lb.get_labeler(name, reference=reference, tokenizer=tokenizer,
                          binary=_yosys(cfg), timeout=timeout)


# --- subcommands -------------------------------------------------------------------


def cmd_extract(args, cfg):
    from . import corpus as cp
    from .tokenizer import ByteCounter

    c = cfg.section("corpus")
    tokenizer = _load_vocab(args.vocab) if args.vocab else ByteCounter()
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    checker = _syntax_checker(args.syntax, cfg)
    units, report = cp.process_tree(args.root, tokenizer, c["min_lines"], c["max_lines"],
                                    c["max_tokens"], checker, c["workers"])
    cp.write_corpus(units, args.out)
    translations = []
    if args.c_dir:
        translations = cp.load_translations(units, args.c_dir, tokenizer, c["max_tokens"])
    pairs = cp.build_instruction_pairs(units, translations, tasks)
    pairs_out = args.pairs_out or str(Path(args.out).with_suffix("")) + ".pairs.jsonl"
    cp.write_jsonl((p.to_record() for p in pairs), pairs_out)
    log.info(
        "extract: %d/%d files kept, %d units, %d pairs, %d dangling, %d malformed, "
        "%d syntax rejects (checker %s)",
        report.files_kept, report.files_seen, len(units), len(pairs), len(report.dangling),
        len(report.malformed), len(report.syntax_rejected), report.syntax_checker or "none",
    )
    for path, why in report.skipped_unreadable:
        log.warning("skipped unreadable file %s: %s", path, why)
    return 0


def _texts_from_records(records):
    for rec in records:
        if "full_text" in rec:
            yield rec["full_text"]
        elif "text" in rec:
            yield rec["text"]
        elif "answer" in rec:
            yield rec["instruction"]
            yield rec["answer"]


def cmd_build_vocab(args, cfg):
    from .tokenizer import build_vocab

    texts = []
    for path in args.corpus:
        texts.extend(_texts_from_records(_read_jsonl(path)))
    vocab = build_vocab(texts, cfg.get("tokenizer", "vocab_size"))
    vocab.save(args.out)
    log.info("build-vocab: %d tokens (%d merges) -> %s", vocab.size, len(vocab.merges), args.out)
    return 0


def _instruction_examples(path):
    from .corpus import InstructionExample, VerilogUnit, build_instruction_pairs

    records = _read_jsonl(path)
    if records and "definition" in records[0]:
        return build_instruction_pairs([VerilogUnit.from_record(r) for r in records])
    return [InstructionExample.from_record(r) for r in records]


def cmd_train_lm(args, cfg):
    from .model import load_checkpoint, save_checkpoint
    from .training import train_generator

    vocab = _load_vocab(args.vocab)
    examples = _instruction_examples(args.data)
    init = load_checkpoint(args.init, vocab) if args.init else None
    mcfg = init.config if init is not None else _model_config(cfg, vocab)
    result = train_generator(examples, vocab, mcfg, _train_config(cfg), args.log, init)
    save_checkpoint(result.params, args.out, vocab)
    log.info("train-lm: loss %.4f -> %.4f; checkpoint %s",
             result.initial_loss, result.final_loss, args.out)
    return 0


def cmd_train_disc(args, cfg):
    from .augment import read_labeled
    from .model import load_checkpoint, save_checkpoint
    from .training import train_discriminator

    vocab = _load_vocab(args.vocab)
    data = read_labeled(args.data)
    held = read_labeled(args.heldout) if args.heldout else None
    init = load_checkpoint(args.init, vocab) if args.init else None
    mcfg = init.config if init is not None else _model_config(cfg, vocab)
    result = train_discriminator(data, vocab, mcfg, _train_config(cfg), held, args.log, init)
    save_checkpoint(result.params, args.out, vocab)
    log.info("train-disc: loss %.4f -> %.4f; held-out accuracy %s; alpha %.4f; checkpoint %s",
             result.initial_loss, result.final_loss, result.heldout_acc,
             result.params.alpha, args.out)
    return 0


def cmd_generate(args, cfg):
    from .corpus import autocomplete_prompt
    from .guidance import generate, sample_unguided
    from .model import load_checkpoint

    vocab = _load_vocab(args.vocab)
    base = load_checkpoint(args.base, vocab)
    disc = load_checkpoint(args.disc, vocab) if args.disc else None
    text = Path(args.prompt).read_text(encoding="utf-8")
    prompt = vocab.encode(autocomplete_prompt(text) if args.definition else text)
    gcfg = _guidance_config(cfg)
    seed = cfg.get("run", "seed")
    out_fh = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
    trace_fh = open(args.trace, "w", encoding="utf-8", newline="\n") if args.trace else None
    try:
        for i in range(args.n):
            stream_seed = [seed, i]
            if disc is not None:
                res = generate(base, disc, prompt, gcfg, seed=stream_seed)
            else:
                res = sample_unguided(base, prompt, gcfg.temperature, gcfg.max_new_tokens,
                                      seed=stream_seed)
            out_fh.write(json.dumps({"sample": i, "text": vocab.decode(res.tokens),
                                     "stop_reason": res.stop_reason}) + "\n")
            if trace_fh:
                for step, t in enumerate(res.trace):
                    trace_fh.write(json.dumps({"sample": i, "step": step, "token": t.token,
                                               "kept": t.kept, "posterior": t.posterior}) + "\n")
    finally:
        if args.out:
            out_fh.close()
        if trace_fh:
            trace_fh.close()
    return 0


def _heads(path):
    from .corpus import SourceFile, VerilogUnit, extract_units, read_jsonl

    p = Path(path)
    if p.suffix in (".jsonl", ".json"):
        return [VerilogUnit.from_record(r).definition for r in read_jsonl(p)]
    units = extract_units(SourceFile.from_text(p, p.read_text(encoding="utf-8")))
    return [u.definition for u in units if not u.malformed]


def cmd_augment(args, cfg):
    from .augment import AugmentJob, run_job, write_labeled
    from .labelers import LabelKind
    from .model import load_checkpoint

    vocab = _load_vocab(args.vocab)
    base = load_checkpoint(args.base, vocab)
    reference = Path(args.reference).read_text(encoding="utf-8") if args.reference else None
    labeler = _make_labeler(args.labeler, cfg, reference, vocab)
    # absolute labelers (equivalence) hold their reference themselves
    job_ref = reference if labeler.kind is LabelKind.RELATIVE else None
    a = cfg.section("augment")
    job = AugmentJob(tuple(_heads(args.heads)), args.n, a["temperature"], args.labeler,
                     job_ref, cfg.get("guidance", "max_new_tokens"), cfg.get("run", "seed"))
    checker = _syntax_checker(args.syntax, cfg)
    examples, report = run_job(base, vocab, job, labeler, checker, a["workers"])
    write_labeled(examples, args.out)
    pos = sum(1 for e in examples if e.label.value == "pos")
    log.info("augment: %d candidates, %d survived syntax, %d checker errors, %d POS / %d NEG",
             report.generated, report.syntax_passed, report.checker_errors, pos,
             len(examples) - pos)
    return 0


def cmd_eval(args, cfg):
    from .evaluation import load_problems, report_emit, run_benchmark
    from .model import load_checkpoint

    vocab = _load_vocab(args.vocab)
    base = load_checkpoint(args.base, vocab)
    disc = load_checkpoint(args.disc, vocab) if args.disc else None
    problems = load_problems(args.problems)
    ks = parse_ks(cfg.get("eval", "ks"))

    def factory(name, reference):
        name = args.labeler or name
        return _make_labeler(name, cfg, reference, vocab)

    gcfg = _guidance_config(cfg)
    records, agg = run_benchmark(
        problems, base, vocab, cfg.get("eval", "n"), ks, disc, gcfg, cfg.get("run", "seed"),
        gcfg.temperature, gcfg.max_new_tokens, factory, cfg.get("eval", "workers"),
    )
    report_emit(records, ks, args.out)
    log.info("eval: %s", json.dumps(agg))
    return 0


COMMANDS = {
    "extract": cmd_extract,
    "build-vocab": cmd_build_vocab,
    "train-lm": cmd_train_lm,
    "train-disc": cmd_train_disc,
    "generate": cmd_generate,
    "augment": cmd_augment,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, usage errors exit 2
        return int(exc.code or 0)
    try:
        cfg = _resolve(args)
    except VGuideError as exc:
        print(f"vguide: configuration error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=getattr(logging, str(cfg.get("run", "log_level")).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    log.info("command %s seed %s config %s", args.command, cfg.get("run", "seed"),
             json.dumps(cfg.as_dict(), sort_keys=True))
    try:
        return COMMANDS[args.command](args, cfg)
    except (VGuideError, OSError, ValueError, KeyError) as exc:
        print(f"vguide: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
