import json
import os
import subprocess
import sys

import numpy as np
import pytest
import torch

from kvtrace_exporter import ExportError, ExportJob, export

# the primary toolchain is the consumer side of the KVTR contract
from kvlab import aggregate_attention, coverage_at, cumulative_distribution, read_trace, validate_trace

PROMPT = ("solve these.\n\n12+34=46; 9*9=81.\n\n7+5=12; 8+8=16.\n\nwhat is 6+7?")


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A locally constructed 2-layer causal model plus byte-level BPE
    tokenizer, loadable through the standard from_pretrained path."""
    from tokenizers import ByteLevelBPETokenizer
    from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

    out = tmp_path_factory.mktemp("tinymodel")
    torch.manual_seed(1234)
    config = GPT2Config(n_layer=2, n_head=2, n_embd=32, vocab_size=600,
                        n_positions=256, bos_token_id=0, eos_token_id=0)
    GPT2LMHeadModel(config).save_pretrained(out)

    bpe = ByteLevelBPETokenizer()
    bpe.train_from_iterator(
        [PROMPT, "the quick brown fox jumps over the lazy dog",
         "numbers 0 1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16"] * 30,
        vocab_size=600, min_frequency=1,
    )
    PreTrainedTokenizerFast(tokenizer_object=bpe._tokenizer).save_pretrained(out)
    return out


def _prompt_with_token_count(model_dir, n_tokens):
    """Find a prompt that tokenizes to exactly n_tokens."""
    from transformers import AutoTokenizer

    tok = AutoTokenizer.from_pretrained(model_dir)
    words = "the quick brown fox jumps over the lazy dog numbers 7 8 9 10".split()
    for length in range(1, len(words) + 1):
        for extra in ("", ".", "!", "?"):
            text = " ".join(words[:length]) + extra
            if len(tok(text, add_special_tokens=False)["input_ids"]) == n_tokens:
                return text
    pytest.fail(f"could not construct a {n_tokens}-token prompt")


def test_export_16_token_prompt_round_trip(tiny_model_dir, tmp_path):
    text = _prompt_with_token_count(tiny_model_dir, 16)
    prompt = tmp_path / "p.txt"
    prompt.write_text(text)
    out = tmp_path / "t.kvtr"
    export(ExportJob(model_id=str(tiny_model_dir), prompt_path=str(prompt),
                     out_path=str(out)))

    trace = read_trace(out)
    assert (trace.L, trace.H, trace.Q, trace.T) == (2, 2, 16, 16)
    assert trace.mode == "full"
    report = validate_trace(trace)
    assert report.hard_failures == [], report.as_dict()

    meta = json.loads((tmp_path / "t.kvtr.meta.json").read_text())
    assert len(meta["tokens"]) == trace.T
    assert meta["sink_count"] == 4
    assert "eager" in meta["model"]


def test_export_trace_is_analyzable(tiny_model_dir, tmp_path):
    prompt = tmp_path / "p.txt"
    prompt.write_text(PROMPT)
    out = tmp_path / "t.kvtr"
    export(ExportJob(model_id=str(tiny_model_dir), prompt_path=str(prompt),
                     out_path=str(out)))
    trace = read_trace(out)
    scores = aggregate_attention(trace)
    assert abs(scores.sum() - trace.L * trace.H * trace.Q) < 1e-2
    curve = cumulative_distribution(scores, exclude_first_n=4)
    assert coverage_at(curve, 1.0) == 1.0


def test_marker_segmentation(tiny_model_dir, tmp_path):
    prompt = tmp_path / "p.txt"
    prompt.write_text(PROMPT)
    out = tmp_path / "t.kvtr"
    export(ExportJob(model_id=str(tiny_model_dir), prompt_path=str(prompt),
                     out_path=str(out)))
    meta = json.loads((tmp_path / "t.kvtr.meta.json").read_text())
    n = len(meta["tokens"])
    assert len(meta["shots"]) == 2
    assert len(meta["mandatory"]) == 2
    spans = sorted(map(tuple, meta["shots"] + meta["mandatory"]))
    assert spans[0][0] == 0 and spans[-1][1] == n
    for (_, e1), (s2, _) in zip(spans, spans[1:]):
        assert e1 == s2


def test_no_marker_gives_one_implicit_shot(tiny_model_dir, tmp_path):
    prompt = tmp_path / "p.txt"
    prompt.write_text("just one unbroken piece of text")
    out = tmp_path / "t.kvtr"
    export(ExportJob(model_id=str(tiny_model_dir), prompt_path=str(prompt),
                     out_path=str(out)))
    meta = json.loads((tmp_path / "t.kvtr.meta.json").read_text())
    assert meta["mandatory"] == []
    assert meta["shots"] == [[0, len(meta["tokens"])]]


def test_empty_prompt_rejected(tiny_model_dir, tmp_path):
    prompt = tmp_path / "empty.txt"
    prompt.write_text("  \n ")
    with pytest.raises(ExportError):
        export(ExportJob(model_id=str(tiny_model_dir), prompt_path=str(prompt),
                         out_path=str(tmp_path / "t.kvtr")))


def test_overlong_prompt_rejected(tiny_model_dir, tmp_path):
    prompt = tmp_path / "long.txt"
    prompt.write_text("word " * 400)
    with pytest.raises(ExportError):
        export(ExportJob(model_id=str(tiny_model_dir), prompt_path=str(prompt),
                         out_path=str(tmp_path / "t.kvtr"), max_len=64))


def test_bad_model_rejected(tmp_path):
    prompt = tmp_path / "p.txt"
    prompt.write_text("hello")
    with pytest.raises(ExportError):
        export(ExportJob(model_id=str(tmp_path / "no_such_model"),
                         prompt_path=str(prompt), out_path=str(tmp_path / "t.kvtr")))


def test_cli_round_trip(tiny_model_dir, tmp_path):
    prompt = tmp_path / "p.txt"
    prompt.write_text(PROMPT)
    out = tmp_path / "cli.kvtr"
    r = subprocess.run(
        [sys.executable, "-m", "kvtrace_exporter.cli", "--model", str(tiny_model_dir),
         "--prompt", str(prompt), "--out", str(out)],
        capture_output=True, text=True,
    )
    assert r.returncode == 0, r.stderr
    assert out.exists()
    assert validate_trace(read_trace(out)).hard_failures == []

    r = subprocess.run(
        [sys.executable, "-m", "kvtrace_exporter.cli", "--model", str(tiny_model_dir),
         "--prompt", str(prompt), "--out", str(out), "--max-len", "2"],
        capture_output=True, text=True,
    )
    assert r.returncode == 1
    assert "export error" in r.stderr


LONG_CONTEXT_PROMPT = (
    "In the northern valley the river turns twice before it reaches the mill. "
    "The miller keeps a ledger of every sack of grain brought in by the farmers, "
    "and each entry lists the field it came from, the day it was cut, and the "
    "name of the cart driver. Years later the ledger was the only record of who "
    "had farmed which field, and the surveyors relied on it to settle a long "
    "boundary dispute between the two villages. What settled the dispute?"
)
ARITHMETIC_PROMPT = (
    "Q: 12+7=19. Q: 33+21=54. Q: 45+17=62. Q: 28+34=62. Q: 51+19=70. "
    "Q: 66+28=94. Q: 14+79=93. Q: 83+9=92. Q: what is 57+26?"
)


def test_fig2_style_sanity_on_real_model(tmp_path):
    """Directional check on genuinely pretrained weights: sink-dominated
    early mass, and long-context prompts showing more concentrated non-sink
    attention than arithmetic few-shot prompts."""
    model_id = os.environ.get("KVLAB_REAL_MODEL", "distilgpt2")
    try:
        from transformers import AutoTokenizer
        AutoTokenizer.from_pretrained(model_id)
    except Exception:
        pytest.skip(f"real pretrained model {model_id!r} unavailable "
                    "(offline environment); set KVLAB_REAL_MODEL to run")

    curves = {}
    for name, text in (("long", LONG_CONTEXT_PROMPT), ("arith", ARITHMETIC_PROMPT)):
        prompt = tmp_path / f"{name}.txt"
        prompt.write_text(text)
        out = tmp_path / f"{name}.kvtr"
        export(ExportJob(model_id=model_id, prompt_path=str(prompt),
                         out_path=str(out), max_len=1024))
        trace = read_trace(out)
        scores = aggregate_attention(trace)
        curves[name] = {
            "with_sinks": cumulative_distribution(scores, exclude_first_n=0),
            "non_sink": cumulative_distribution(scores, exclude_first_n=4),
        }
    assert coverage_at(curves["long"]["with_sinks"], 0.01) > 0.5
    assert (coverage_at(curves["long"]["non_sink"], 0.20)
            > coverage_at(curves["arith"]["non_sink"], 0.20))
