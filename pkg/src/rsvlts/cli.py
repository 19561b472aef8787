"""Command-line entry point: ``rsvlts <subcommand> ...``.

Exit codes: 0 success, 1 validation error or bad usage, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from rsvlts import __version__

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_text(path: str | None, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8", newline="\n")


def _space(args):
    from rsvlts.textcodec import CoordSpace

    if args.space == "pixel":
        return CoordSpace.pixel(1, 1)
    return CoordSpace("normalized", args.bins, 1, 1)


def cmd_convert(args) -> int:
    from rsvlts.convert import ConvertOptions, convert_file, write_records

    opts = ConvertOptions(args.task, _space(args), args.keypoints, args.eps, args.seed)
    records = convert_file(args.input, opts, args.workers)
    write_records(records, args.out)
    logging.info("wrote %d records to %s", len(records), args.out)
    return EXIT_OK


def cmd_augment(args) -> int:
    from rsvlts.augment import augment_corpus
    from rsvlts.convert import read_records, write_records

    stats: dict = {}
    records = [r for path in args.input for r in read_records(path)]
    out = augment_corpus(records, args.cyclic_ratio, args.seed, stats)
    write_records(out, args.out)
    logging.info("augment: %s", json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_decompose(args) -> int:
    from rsvlts.condparse import parse_conditions
    from rsvlts.textcodec import split_instruction

    _, text = split_instruction(args.instruction)
    chain = parse_conditions(text, passthrough=args.passthrough)
    print(json.dumps(chain.to_dict(), indent=2 if args.pretty else None, sort_keys=True))
    return EXIT_OK


def _load_scene(path: str, scene_id: str | None):
    from rsvlts.condparse import SceneGraph
    from rsvlts.convert import scene_from_dict

    p = Path(path)
    if p.suffix == ".jsonl":
        rows = [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]
        if scene_id is not None:
            rows = [r for r in rows if str(r["id"]) == scene_id]
            if not rows:
                raise ValueError(f"no scene with id {scene_id!r} in {path}")
        if not rows:
            raise ValueError(f"{path} holds no scenes")
        return scene_from_dict(rows[0], p.parent).scene_graph()
    return SceneGraph.from_dict(json.loads(p.read_text(encoding="utf-8")))


def cmd_resolve(args) -> int:
    from rsvlts.condparse import OracleGrounder, RemoteGrounder, parse_conditions, resolve
    from rsvlts.textcodec import serialize_answer, split_instruction

    _, text = split_instruction(args.instruction)
    url = args.grounder_url or os.environ.get("RSVLTS_GROUNDER_URL")
    if args.scene:
        grounder = OracleGrounder(_load_scene(args.scene, args.scene_id), args.near_fraction)
        chain = parse_conditions(text)
    elif url:
        if not args.image:
            raise ValueError("--image is required with a remote grounder")
        grounder = RemoteGrounder(url, args.image, timeout=args.timeout)
        chain = parse_conditions(text, passthrough=True)
    else:
        raise ValueError("give --scene for the oracle grounder or --grounder-url / RSVLTS_GROUNDER_URL")
    res = resolve(chain, grounder)
    for t in res.trace:
        state = "skipped" if t.skipped else f"{'-' if t.in_count is None else t.in_count} -> {t.out_count}"
        print(f"step {t.index}: {t.step} [{state}]", file=sys.stderr)
    out = {"answer": serialize_answer(res.answer), **res.to_dict()}
    if isinstance(grounder, RemoteGrounder):
        out["retries"] = grounder.retries
        out["parse_failures"] = len(grounder.parse_failures)
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_emit_prompts(args) -> int:
    from rsvlts.convert import emit_segmenter_prompts, read_records

    n = emit_segmenter_prompts(read_records(args.input), args.out)
    logging.info("wrote %d prompt lines to %s", n, args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from rsvlts.metrics import evaluate_files, report_json, report_table

    report = evaluate_files(args.gt, args.pred, args.iou)
    if args.out:
        _write_text(args.out, report_json(report))
    _write_text(None, report_json(report) if args.format == "json" else report_table(report))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from rsvlts.kernels import BACKEND
    from rsvlts.selfcheck import run_selfcheck

    print(f"kernel backend: {BACKEND}")
    results = run_selfcheck(args.scale, args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail} ({r.seconds:.1f}s)")
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


def cmd_validate(args) -> int:
    from rsvlts.convert import validate_file

    problems = validate_file(args.input)
    for p in problems:
        print(p)
    if problems:
        return EXIT_INVALID
    print("ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rsvlts", description="Unified remote-sensing vision-language task records and tools.")
    p.add_argument("--version", action="version", version=f"rsvlts {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("convert", help="scene annotations to instruction records")
    c.add_argument("input")
    c.add_argument("--task", required=True, choices=["detection", "grounding", "seg", "change", "geoloc", "caption"])
    c.add_argument("--out", required=True)
    c.add_argument("--space", choices=["normalized", "pixel"], default="normalized")
    c.add_argument("--bins", type=int, default=1000)
    c.add_argument("--keypoints", type=int, default=3)
    c.add_argument("--eps", type=float, default=1.0, help="polygon simplification tolerance in pixels")
    c.add_argument("--seed", type=int, default=0, help="template choice seed")
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(fn=cmd_convert)

    a = sub.add_parser("augment", help="append cyclic region-caption counterparts")
    a.add_argument("input", nargs="+", help="record files, concatenated in order")
    a.add_argument("--out", required=True)
    a.add_argument("--cyclic-ratio", type=float, default=1.0)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(fn=cmd_augment)

    d = sub.add_parser("decompose", help="print the condition chain of an instruction")
    d.add_argument("instruction")
    d.add_argument("--passthrough", action="store_true", help="return unparseable text as one opaque step")
    d.add_argument("--pretty", action="store_true")
    d.set_defaults(fn=cmd_decompose)

    r = sub.add_parser("resolve", help="resolve an instruction step by step")
    r.add_argument("instruction")
    r.add_argument("--scene", help="scene graph .json or scene annotation .jsonl (oracle grounder)")
    r.add_argument("--scene-id")
    r.add_argument("--near-fraction", type=float, default=0.1)
    r.add_argument("--grounder-url", help="remote grounder endpoint (default: $RSVLTS_GROUNDER_URL)")
    r.add_argument("--image", help="image path sent to the remote grounder")
    r.add_argument("--timeout", type=float, default=30.0)
    r.set_defaults(fn=cmd_resolve)

    e = sub.add_parser("emit-prompts", help="segmenter prompt file from seg records")
    e.add_argument("input")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_emit_prompts)

    v = sub.add_parser("evaluate", help="score predictions against ground truth")
    v.add_argument("--gt", required=True)
    v.add_argument("--pred", required=True)
    v.add_argument("--iou", type=float, default=0.5)
    v.add_argument("--format", choices=["table", "json"], default="table")
    v.add_argument("--out", help="also write the JSON report here")
    v.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("selfcheck", help="run the reference-oracle suites")
    s.add_argument("--scale", type=float, default=1.0, help="fraction of the default sample counts")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_selfcheck)

    val = sub.add_parser("validate", help="check a record file")
    val.add_argument("input")
    val.set_defaults(fn=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from rsvlts.condparse import GrounderTransportError, GroundingError

    try:
        return args.fn(args)
    except GroundingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc.cause, (GrounderTransportError, OSError)) else EXIT_INVALID
    except (OSError, GrounderTransportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
