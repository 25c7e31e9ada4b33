"""CLI: dump one prompt's attention trace from a pretrained model."""

from __future__ import annotations

import argparse
import sys

from .exporter import DEFAULT_MARKER, ExportError, ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvtrace-export",
        description="Export a pretrained model's attention matrices to a KVTR trace.",
    )
    parser.add_argument("--model", required=True,
                        help="Model id or local directory loadable by transformers.")
    parser.add_argument("--prompt", required=True, help="Prompt text file.")
    parser.add_argument("--out", required=True, help="Output .kvtr path.")
    parser.add_argument("--marker", default=DEFAULT_MARKER,
                        help="Shot boundary marker (default: blank line).")
    parser.add_argument("--max-len", type=int, default=512,
                        help="Maximum tokenized prompt length.")
    parser.add_argument("--device", default="cpu")
    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        model_id=args.model,
        prompt_path=args.prompt,
        out_path=args.out,
        marker=args.marker,
        max_len=args.max_len,
        device=args.device,
    )
    try:
        path = export(job)
    except ExportError as exc:
        print(f"export error: {exc}", file=sys.stderr)
        sys.exit(1)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(2)
    print(f"wrote {path} and {path}.meta.json")


if __name__ == "__main__":
    main()
