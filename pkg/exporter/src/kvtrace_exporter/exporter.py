"""Dump a pretrained model's attention matrices for one prompt.

Loads any causal model the local transformers install can resolve, runs a
single forward pass with attention outputs enabled, and writes the full
[layer][head][query][key] tensor in the KVTR format together with token
and shot metadata.

Shot boundaries come from splitting the prompt on a marker string (blank
line by default) and mapping the character spans to token indices via the
tokenizer's offset mapping. With three or more segments the first and
last are recorded as mandatory (instruction prefix, question suffix) and
the middle ones as shots; a marker-free prompt is one implicit shot.

Attention is taken post-softmax per layer and head; grouped-query models
already expose one row per query head, so H always matches the header.
Numerically masked acausal residue is zeroed before writing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kvtr import write_kvtr

DEFAULT_MARKER = "\n\n"
ROW_SUM_LIMIT = 1e-2
SINK_COUNT = 4


class ExportError(Exception):
    """Prompt, model or attention output unfit for export."""


@dataclass
class ExportJob:
    model_id: str
    prompt_path: str
    out_path: str
    marker: str = DEFAULT_MARKER
    max_len: int = 512
    device: str = "cpu"
    dtype: str = "float32"
    params: dict = field(default_factory=dict)


def _load(model_id: str, device: str):
    import torch
    from transformers import AutoModel, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModel.from_pretrained(
            model_id, attn_implementation="eager", torch_dtype=torch.float32
        )
    except Exception as exc:
        raise ExportError(f"cannot load model {model_id!r}: {exc}") from exc
    model.to(device)
    model.eval()
    return tokenizer, model


def _char_segments(text: str, marker: str):
    """Character spans split on the marker, trailing marker attached."""
    if not marker:
        raise ExportError("marker must be non-empty")
    spans = []
    start = 0
    while True:
        i = text.find(marker, start)
        if i < 0:
            if start < len(text):
                spans.append((start, len(text)))
            break
        spans.append((start, i + len(marker)))
        start = i + len(marker)
    return [s for s in spans if s[1] > s[0]]


def _token_spans(char_spans, offsets, n_tokens: int):
    """Map character segments to half-open token ranges by start offset."""
    spans = []
    for a, b in char_spans:
        toks = [i for i, (s, _) in enumerate(offsets) if a <= s < b]
        if toks:
            spans.append((min(toks), max(toks) + 1))
    # force contiguity: stretch each span to the next span's start
    fixed = []
    for i, (s, e) in enumerate(spans):
        end = spans[i + 1][0] if i + 1 < len(spans) else n_tokens
        fixed.append((s, max(e, s + 1) if end <= s else end))
    return fixed


def _segment_roles(token_spans):
    """(shots, mandatory) per the few-shot convention."""
    if len(token_spans) >= 3:
        return token_spans[1:-1], [token_spans[0], token_spans[-1]]
    if len(token_spans) == 2:
        return token_spans[:1], token_spans[1:]
    return token_spans, []


def export(job: ExportJob) -> Path:
    """Run the prompt through the model and write trace + sidecar.

    Returns the written trace path.
    """
    import torch

    text = Path(job.prompt_path).read_text(encoding="utf-8")
    if not text.strip():
        raise ExportError(f"{job.prompt_path}: prompt is empty")

    tokenizer, model = _load(job.model_id, job.device)
    enc = tokenizer(text, return_offsets_mapping=True, add_special_tokens=False)
    ids = enc["input_ids"]
    offsets = enc["offset_mapping"]
    if len(ids) < 1:
        raise ExportError("prompt tokenized to zero tokens")
    if len(ids) > job.max_len:
        raise ExportError(
            f"prompt tokenizes to {len(ids)} tokens, above the {job.max_len} limit"
        )

    with torch.no_grad():
        out = model(
            torch.tensor([ids], device=job.device),
            output_attentions=True,
            use_cache=False,
        )
    if not getattr(out, "attentions", None):
        raise ExportError(f"model {job.model_id!r} returned no attention outputs")
    att = torch.stack(out.attentions, dim=0)[:, 0]   # (L, H, T, T)
    weights = att.to(torch.float32).cpu().numpy()

    T = weights.shape[-1]
    sums = weights.sum(axis=-1, dtype=np.float64)
    worst = float(np.abs(sums - 1.0).max())
    if worst > ROW_SUM_LIMIT:
        l, h, q = np.unravel_index(int(np.abs(sums - 1.0).argmax()), sums.shape)
        raise ExportError(
            f"attention row (l={l}, h={h}, q={q}) sums to {sums[l, h, q]:.4f}; "
            f"not post-softmax within {ROW_SUM_LIMIT}"
        )
    iu = np.triu_indices(T, k=1)
    weights[..., iu[0], iu[1]] = 0.0     # strip numerically-masked acausal residue

    spans = _token_spans(_char_segments(text, job.marker), offsets, len(ids))
    shots, mandatory = _segment_roles(spans)

    write_kvtr(
        weights,
        job.out_path,
        tokens=ids,
        shots=shots,
        mandatory=mandatory,
        sink_count=SINK_COUNT,
        model=f"{job.model_id} (transformers, eager attention)",
        params={
            "marker": job.marker,
            "max_len": job.max_len,
            "row_sum_worst": worst,
            **job.params,
        },
    )
    return Path(job.out_path)
