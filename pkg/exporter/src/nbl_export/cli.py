"""CLI: export activations from a pretrained model, or verify a dump dir."""

from __future__ import annotations

import argparse
import sys

from .export import ExportJob, UnsupportedArchitectureError, export_activations
from .verify import verify_dumps


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nbl-export")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="dump per-layer attention activations")
    p.add_argument("--model", required=True, help="hub name or local path")
    p.add_argument("--text", required=True, help="calibration text file (utf-8)")
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--ctx", type=int, default=2048)
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--dtype", choices=("float32", "native"), default="float32")

    p = sub.add_parser("verify", help="validate a directory of .nbla dumps")
    p.add_argument("--dumps", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        report = verify_dumps(args.dumps)
        for line in report.lines():
            print(line)
        return 0 if report.ok else 1

    job = ExportJob(
        model_id=args.model,
        text_path=args.text,
        samples=args.samples,
        context=args.ctx,
        out_dir=args.out,
        dtype_policy=args.dtype,
        batch_size=args.batch,
    )
    try:
        report = export_activations(job)
    except (ValueError, FileNotFoundError, UnsupportedArchitectureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(
        f"exported {report.layers} layers x 2 roles, {report.tokens} tokens each, "
        f"h={report.hidden_size} -> {report.out_dir}"
    )
    print(f"residual-identity max-abs error: {report.worst_residual():.3e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
