"""`lptrace export`: pull logprob traces from an OpenAI-compatible endpoint."""

from __future__ import annotations

import argparse
import sys

from .client import EndpointSpec, LogprobsUnsupportedError
from .export import export_samples, load_questions


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lptrace",
        description="Export per-token logprob traces as score records.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export")
    p.add_argument("--endpoint", required=True, help="base URL, e.g. http://host:8000/v1")
    p.add_argument("--model", required=True)
    p.add_argument("--role", required=True, choices=("draft", "target"))
    p.add_argument("--questions", required=True,
                   help="line-delimited {id, question, optional choices} file")
    p.add_argument("-m", type=int, required=True, help="samples per question")
    p.add_argument("--turns", type=int, required=True, help="blocks per sample")
    p.add_argument("--out", required=True, help="output record file")
    p.add_argument("--max-tokens-per-block", type=int, default=500)
    p.add_argument("--temperature", type=float, default=0.8)
    p.add_argument("--concurrency", type=int, default=4)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        endpoint = EndpointSpec(
            base_url=args.endpoint, model_name=args.model, role=args.role,
            max_tokens_per_block=args.max_tokens_per_block,
            temperature=args.temperature)
        questions = load_questions(args.questions)
        report = export_samples(endpoint, questions, args.m, args.turns, args.out,
                                concurrency=args.concurrency)
    except LogprobsUnsupportedError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {report.records_written} records to {args.out}")
    if report.gaps:
        print(f"warning: {len(report.gaps)} gaps after retries: "
              f"{report.gaps[:10]}{' ...' if len(report.gaps) > 10 else ''}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
