from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import needs_yosys, perturbed
from vguide.augment import (
    DEFAULT_TEMPERATURE, AugmentJob, AugmentReport, Candidate, LabeledExample, complete_heads,
    label_absolute, label_relative, positive_examples_as_instructions, read_labeled, run_job,
    syntax_filter, write_labeled,
)
from vguide.errors import ConfigurationError
from vguide.labelers import (
    BuiltinSyntax, CallableLabeler, KeywordLabeler, LabelKind, LengthLabeler, MetricResult,
    Status, YosysSyntax,
)
from vguide.model import Control, ModelConfig, ModelParameters

HEADS = ("module a;", "module b(input x);")


@pytest.fixture(scope="module")
def generator(small_vocab):
    cfg = ModelConfig(vocab_size=small_vocab.size, context_length=96, embed_dim=16,
                      num_layers=1, num_heads=2, seed=7)
    return perturbed(ModelParameters.init(cfg), scale=0.5, seed=3)


def metric_labeler(values, kind=LabelKind.RELATIVE):
    """Relative labeler whose metric is looked up from a dict keyed by text."""
    def fn(text):
        v = values[text]
        return MetricResult(Status.OK, float(v)) if v is not None else \
            MetricResult(Status.TOOL_ERROR, None, "", "boom")
    return CallableLabeler("table", fn, kind)


def test_job_validation():
    assert AugmentJob(HEADS).temperature == DEFAULT_TEMPERATURE
    with pytest.raises(ConfigurationError):
        AugmentJob(HEADS, samples_per_head=0)
    with pytest.raises(ConfigurationError):
        AugmentJob(HEADS, temperature=0)
    with pytest.raises(ConfigurationError):
        AugmentJob(HEADS, labeler="length").check_labeler(LengthLabeler())
    with pytest.raises(ConfigurationError):
        AugmentJob(HEADS, reference="module r; endmodule").check_labeler(BuiltinSyntax())


def test_cardinality_and_order(generator, small_vocab):
    job = AugmentJob(HEADS, samples_per_head=3, max_new_tokens=12, seed=1)
    cands = complete_heads(generator, small_vocab, job)
    assert len(cands) == 6
    assert [(c.head_index, c.sample_index) for c in cands] == [(h, s) for h in range(2)
                                                              for s in range(3)]


def test_seed_reproducibility(generator, small_vocab):
    job = AugmentJob(HEADS, samples_per_head=2, max_new_tokens=10, seed=5)
    assert complete_heads(generator, small_vocab, job) == complete_heads(generator, small_vocab, job)


def test_low_temperature_collapse(generator, small_vocab):
    job = AugmentJob(HEADS, samples_per_head=3, temperature=0.01, max_new_tokens=16, seed=2)
    cands = complete_heads(generator, small_vocab, job)
    for h in range(2):
        texts = Counter(c.text for c in cands if c.head_index == h)
        assert texts.most_common(1)[0][1] >= 2


def test_oversized_head_skipped(generator, small_vocab):
    report = AugmentReport()
    job = AugmentJob(("module a;", "module " + "x" * 200 + ";"), samples_per_head=1,
                     max_new_tokens=4)
    cands = complete_heads(generator, small_vocab, job, report)
    assert {c.head_index for c in cands} == {0}
    assert [h for h, _ in report.skipped_heads] == [1]


def test_syntax_filter_keeps_valid(d_latch_text):
    report = AugmentReport(generated=2)
    bad = d_latch_text.replace("endmodule", "")
    kept = syntax_filter([d_latch_text, bad], BuiltinSyntax(), report)
    assert kept == [d_latch_text]
    assert (report.syntax_passed, report.syntax_failed) == (1, 1)
    assert report.survival_rate == 0.5
    assert syntax_filter(kept, BuiltinSyntax()) == kept


def test_syntax_filter_tallies_checker_crash():
    report = AugmentReport()
    flaky = CallableLabeler("flaky", lambda t: 1 / 0)
    assert syntax_filter(["module m; endmodule"], flaky, report) == []
    assert report.checker_errors == 1 and report.syntax_failed == 0


texts = st.lists(st.sampled_from([
    "module m; endmodule", "module m; begin endmodule", "module n(a); wire a; endmodule",
    "wire x;", "module q; always @(posedge c) x <= 1; endmodule",
]), max_size=12)


@given(texts)
def test_syntax_filter_matches_recheck(cands):
    kept = syntax_filter(cands, BuiltinSyntax())
    assert kept == [c for c in cands if BuiltinSyntax().run(c).passed]


@given(texts)
def test_absolute_labels_total_and_deterministic(cands):
    lab = KeywordLabeler("posedge")
    first = label_absolute(cands, lab)
    assert len(first) == len(cands)
    assert first == label_absolute(cands, lab)
    assert [e.label is Control.POS for e in first] == ["posedge" in c for c in cands]


def test_absolute_error_becomes_neg():
    lab = CallableLabeler("err", lambda t: MetricResult(Status.TIMEOUT, None, "", "slow"))
    (ex,) = label_absolute(["x"], lab)
    assert ex.label is Control.NEG and ex.reason.startswith("timeout")


def test_absolute_rejects_relative_or_missing_tool(monkeypatch):
    with pytest.raises(ConfigurationError):
        label_absolute(["x"], LengthLabeler())
    monkeypatch.setenv("VGUIDE_YOSYS", "/nonexistent")
    monkeypatch.setenv("PATH", "/nonexistent")
    with pytest.raises(ConfigurationError):
        label_absolute(["x"], YosysSyntax())


def test_relative_worked_example_and_tie():
    lab = metric_labeler({"ref": 657, "good": 255.3, "tie": 657, "bad": 900, "err": None})
    out = label_relative(["good", "tie", "bad", "err"], lab, "ref")
    assert [e.label for e in out] == [Control.POS, Control.NEG, Control.NEG, Control.NEG]
    assert out[0].metric_value == 255.3 and out[0].reference_metric == 657
    assert out[3].reason.startswith("tool_error")


@given(st.lists(st.integers(0, 20), max_size=15), st.integers(0, 20))
def test_relative_partition_matches_comparison(values, ref):
    table = {f"c{i}": v for i, v in enumerate(values)}
    table["ref"] = ref
    out = label_relative(list(table)[:-1], metric_labeler(table), "ref")
    assert [e.label is Control.POS for e in out] == [v < ref for v in values]


def test_relative_reference_failure_is_job_error():
    with pytest.raises(ConfigurationError):
        label_relative(["a"], metric_labeler({"ref": None, "a": 1}), "ref")


def test_run_job_end_to_end(generator, small_vocab, tmp_path):
    job = AugmentJob(HEADS, samples_per_head=2, max_new_tokens=8, labeler="length",
                     reference="module r; endmodule", seed=0)
    always_ok = CallableLabeler("ok", lambda t: MetricResult(Status.OK, 1.0))
    examples, report = run_job(generator, small_vocab, job, LengthLabeler(), always_ok)
    assert report.generated == 4 and len(examples) == 4
    path = tmp_path / "labeled.jsonl"
    write_labeled(examples, path)
    assert read_labeled(path) == examples
    first = path.read_text().splitlines()[0]
    assert first.startswith('{"text": ')
    assert list(examples[0].to_record()) == ["text", "label", "metric_value", "labeler",
                                             "reference_metric", "reason"]


def test_positive_examples_become_instructions(d_latch_text):
    exs = [LabeledExample(d_latch_text, Control.POS), LabeledExample("module z; endmodule",
                                                                     Control.NEG)]
    pairs = positive_examples_as_instructions(exs)
    assert len(pairs) == 1 and pairs[0].answer.startswith("module d_latch")


@needs_yosys
def test_yosys_filter_on_fixture(d_latch_text):
    assert syntax_filter([d_latch_text, "module m ("], YosysSyntax()) == [d_latch_text]


def test_candidate_objects_accepted(d_latch_text):
    c = Candidate(0, 0, d_latch_text)
    assert syntax_filter([c], BuiltinSyntax()) == [c]
    assert label_absolute([c], BuiltinSyntax())[0].text == d_latch_text
