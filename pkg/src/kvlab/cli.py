"""Command-line interface.

Exit codes: 0 on success, 1 on validation errors (bad parameters,
budgets, segmentations), 2 on I/O or file-format errors.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import analysis, harness, traceio
from .cache import SCOPE_GLOBAL, SCOPE_PER_LAYER
from .errors import ConfigurationError, FormatError, ValidationError
from .model import ModelConfig, init_model, prefill, tokenize
from .policies import ShotSegmentation, policy_from_config, run_policy


@click.group()
@click.option("--seed", type=int, default=None, help="Override the model seed.")
@click.option("--out-dir", type=click.Path(), default=".", help="Directory for outputs.")
@click.option("--config", "config_path", type=str, default=None,
              help="Experiment config JSON ('demo' for the bundled demo).")
@click.pass_context
def cli(ctx, seed, out_dir, config_path):
    """Desk-scale KV-cache compression laboratory."""
    ctx.ensure_object(dict)
    ctx.obj.update(seed=seed, out_dir=Path(out_dir), config_path=config_path)


def _load_experiment(ctx) -> harness.ExperimentConfig:
    path = ctx.obj.get("config_path")
    if path is None:
        raise ConfigurationError("this command needs --config (or --config demo)")
    if path == "demo":
        cfg = harness.demo_config(out_dir=str(ctx.obj["out_dir"]))
    else:
        cfg = harness.ExperimentConfig.from_json(Path(path).read_text(encoding="utf-8"))
    if ctx.obj.get("seed") is not None:
        cfg.model = ModelConfig(**{**_model_dict(cfg.model), "seed": ctx.obj["seed"]})
    return cfg


def _model_dict(mc: ModelConfig) -> dict:
    return {
        "layers": mc.layers, "heads": mc.heads, "head_dim": mc.head_dim,
        "vocab_size": mc.vocab_size, "max_seq": mc.max_seq, "seed": mc.seed,
        "rope_base": mc.rope_base,
    }


def _out(ctx, name) -> Path:
    out_dir = ctx.obj["out_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / name


@cli.command()
@click.option("--text", default=None, help="Inline prompt text.")
@click.option("--prompt-file", type=click.Path(exists=True), default=None)
@click.option("--marker", default="\n\n", show_default=False,
              help="Shot boundary marker for segmentation (default: blank line).")
@click.option("--layers", type=int, default=2)
@click.option("--heads", type=int, default=2)
@click.option("--head-dim", type=int, default=16)
@click.option("--max-seq", type=int, default=512)
@click.option("--last-row", is_flag=True, help="Store only the final query row.")
@click.option("--out", "out_name", default="trace.kvtr", show_default=True)
@click.pass_context
def trace(ctx, text, prompt_file, marker, layers, heads, head_dim, max_seq,
          last_row, out_name):
    """Run a prompt through the toy model and write a KVTR trace."""
    if text is None and prompt_file is None:
        raise ConfigurationError("provide --text or --prompt-file")
    if text is None:
        text = Path(prompt_file).read_text(encoding="utf-8")
    seed = ctx.obj.get("seed") or 0
    config = ModelConfig(layers=layers, heads=heads, head_dim=head_dim,
                         max_seq=max_seq, seed=seed)
    model = init_model(config)
    tokens = tokenize(text)
    seg = ShotSegmentation.from_marked_text(text, marker)
    seg.validate(len(tokens))
    _, tr, _ = prefill(model, tokens, full_trace=not last_row)
    tr.meta.shots = [list(s) for s in seg.shots]
    tr.meta.mandatory = [list(m) for m in seg.mandatory]
    path = _out(ctx, out_name)
    traceio.write_trace(tr, path)
    click.echo(f"wrote {path} ({tr.L}x{tr.H}x{tr.Q}x{tr.T}) and {path}.meta.json")


@cli.command()
@click.option("--trace", "trace_path", type=click.Path(exists=True), required=True)
@click.option("--policy", "kind", required=True)
@click.option("--ratio", type=float, default=0.5, show_default=True)
@click.option("--r-p", type=float, default=None, help="ShotKV prefill ratio.")
@click.option("--r-d", type=float, default=None, help="ShotKV decoding ratio.")
@click.option("--param", "params", multiple=True, metavar="NAME=VALUE",
              help="Extra policy parameter, repeatable.")
@click.option("--out", "out_name", default="retained.json", show_default=True)
@click.pass_context
def compress(ctx, trace_path, kind, ratio, r_p, r_d, params, out_name):
    """Apply a policy to a stored trace and write the retained set as JSON."""
    tr = traceio.read_trace(trace_path)
    config = {"kind": kind}
    if kind == "ShotKV":
        config["r_p"] = r_p if r_p is not None else ratio
        config["r_d"] = r_d if r_d is not None else ratio
    elif kind != "FullKV":
        config["ratio"] = ratio
    for item in params:
        name, _, value = item.partition("=")
        if not _:
            raise ConfigurationError(f"--param needs NAME=VALUE, got {item!r}")
        try:
            config[name] = json.loads(value)
        except json.JSONDecodeError:
            config[name] = value
    policy = policy_from_config(config)
    seg = None
    if tr.meta is not None and (tr.meta.shots or tr.meta.mandatory):
        seg = ShotSegmentation(
            shots=[tuple(s) for s in tr.meta.shots],
            mandatory=[tuple(m) for m in tr.meta.mandatory],
        )
    retained = run_policy(policy, tr, seg)
    if retained.scope == SCOPE_GLOBAL:
        idx = [int(i) for i in retained.indices]
    elif retained.scope == SCOPE_PER_LAYER:
        idx = [[int(i) for i in layer] for layer in retained.indices]
    else:
        idx = [[[int(i) for i in head] for head in layer] for layer in retained.indices]
    payload = {
        "policy": policy.as_config(),
        "segment": retained.segment,
        "scope": retained.scope,
        "n": tr.T,
        "indices": idx,
    }
    path = _out(ctx, out_name)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    click.echo(f"wrote {path}")


@cli.command()
@click.option("--trace", "trace_path", type=click.Path(exists=True), required=True)
@click.option("--exclude-sinks", type=int, default=0, show_default=True,
              help="Drop this many leading tokens before the coverage curve.")
@click.option("--coverage-at", "coverage_p", type=float, default=None,
              help="Print the mass fraction at this token fraction.")
@click.option("--out", "out_name", default="coverage.csv", show_default=True)
@click.option("--heatmap", is_flag=True, help="Also write a PGM heatmap.")
@click.option("--layer", type=int, default=0, show_default=True)
@click.option("--head", default="mean", show_default=True,
              help="Head index or 'mean'.")
@click.option("--heatmap-out", default="heatmap.pgm", show_default=True)
@click.pass_context
def analyze(ctx, trace_path, exclude_sinks, coverage_p, out_name, heatmap,
            layer, head, heatmap_out):
    """Coverage-curve CSV (and optional heatmap) from a stored trace."""
    tr = traceio.read_trace(trace_path)
    scores = analysis.aggregate_attention(tr)
    curve = analysis.cumulative_distribution(scores, exclude_first_n=exclude_sinks,
                                             source=str(trace_path))
    path = _out(ctx, out_name)
    analysis.write_coverage_csv(curve, path)
    click.echo(f"wrote {path} (aggregated over all layers/heads/query rows, "
               f"excluding first {exclude_sinks} tokens)")
    if coverage_p is not None:
        click.echo(f"coverage_at({coverage_p:g}) = "
                   f"{analysis.coverage_at(curve, coverage_p):.6f}")
    if heatmap:
        hp = _out(ctx, heatmap_out)
        analysis.heatmap_export(tr, layer, head, hp)
        click.echo(f"wrote {hp}")


@cli.command()
@click.option("--out", "out_name", default="sweep.csv", show_default=True)
@click.pass_context
def sweep(ctx, out_name):
    """Ratio sweep over the configured policies (needs --config)."""
    cfg = _load_experiment(ctx)
    path = _out(ctx, out_name)
    rows = harness.ratio_sweep(cfg, path)
    click.echo(f"wrote {path} ({len(rows)} rows)")


@cli.command()
@click.option("--scores", "scores_path", type=click.Path(exists=True), required=True,
              help="CSV of label,value accuracy scores.")
@click.option("--baseline", default="FullKV", show_default=True)
@click.pass_context
def deltap(ctx, scores_path, baseline):
    """Relative performance change of each score against a baseline."""
    scores = harness.read_scores_csv(scores_path)
    click.echo(f"{'label':<20} {'value':>10} {'delta_p':>10}")
    for label, value, dp in harness.delta_p_table(scores, baseline):
        click.echo(f"{label:<20} {value:>10.4f} {dp:>+10.4f}")


@cli.command()
@click.option("--repetitions", type=int, default=100, show_default=True)
@click.pass_context
def bench(ctx, repetitions):
    """Selection-overhead microbenchmark per policy (needs --config)."""
    cfg = _load_experiment(ctx)
    rows = harness.bench_policies(cfg, repetitions=repetitions)
    click.echo(harness.format_bench_report(rows))


@cli.command()
@click.option("--csv", "csv_path", type=click.Path(exists=True), required=True)
@click.option("--metric", default="kl", show_default=True)
@click.option("--out", "out_name", default="sweep.svg", show_default=True)
@click.pass_context
def plot(ctx, csv_path, metric, out_name):
    """Render a sweep CSV as an SVG line chart."""
    path = _out(ctx, out_name)
    harness.plot_sweep(csv_path, path, metric=metric)
    click.echo(f"wrote {path}")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False, obj={})
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.Abort:
        sys.exit(1)
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except (FormatError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    sys.exit(0)


if __name__ == "__main__":
    main()
