"""Command-line interface.

    darkselect <subcommand> [--config FILE] [--run-dir DIR] [--seed N] [--force] [overrides...]

Every configuration field can be overridden on the command line
(``--compact-lo 0.5``, ``--compare-methods unselected,ours-utt``,
``--target-size none``). Exit status: 0 on success, 1 on invalid input,
2 on I/O or subprocess failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import types
import typing
from dataclasses import fields
from pathlib import Path

from . import __version__
from .errors import DarkselectError, ValidationError
from .manifest import read_manifest, write_manifest
from .pipeline import PATH_FIELDS, STAGES, RunConfig, run_pipeline
from .scoring import read_score_table
from .selection import SelectionConfig, select
from .synth import SyntheticSpec, generate_corpus

log = logging.getLogger("darkselect")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2

# subcommand -> (stages to run, forced config values)
STAGE_COMMANDS = {
    "screen-text": (["screen_text"], {}),
    "align": (["ctc"], {"ctc_mode": "align"}),
    "score": (["ctc"], {"ctc_mode": "timings"}),
    "screen-speaker": (["screen_speaker"], {}),
    "select": (["select"], {}),
    "metrics": (["metrics"], {}),
    "loop": (None, {}),
}
_EXPLICIT = {"run_dir", "seed"}


def _parse_optional(convert):
    def parse(text: str):
        return None if text.lower() in ("none", "null", "") else convert(text)
    return parse


def _parse_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _parse_pair(convert):
    def parse(text: str):
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
        return tuple(convert(p) for p in parts)
    return parse


def _converter(hint) -> typing.Callable[[str], typing.Any]:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        inner = next(a for a in args if a is not type(None))
        return _parse_optional(_converter(inner))
    if origin is list:
        return _parse_list
    if origin is tuple:
        return _parse_pair(args[0])
    if hint in (int, float, str):
        return hint
    raise TypeError(f"no command-line converter for {hint!r}")


def add_dataclass_overrides(parser: argparse.ArgumentParser, cls, skip=frozenset()) -> None:
    """One ``--field-name`` option per dataclass field, default unset."""
    hints = typing.get_type_hints(cls)
    group = parser.add_argument_group("configuration overrides")
    for f in fields(cls):
        if f.name in skip:
            continue
        group.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f"cfg_{f.name}",
            type=_converter(hints[f.name]),
            default=None,
            metavar=f.name.upper(),
        )


def _overrides(args: argparse.Namespace) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def build_config(args: argparse.Namespace, forced: dict | None = None) -> RunConfig:
    """Config file (paths relative to the file) overlaid with command-line
    values (paths relative to the working directory)."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if not args.config:
        cfg.resolve_paths(Path.cwd())
    over = _overrides(args)
    for key in ("run_dir", "seed"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    over.update(forced or {})
    for key, value in over.items():
        if key in PATH_FIELDS and value is not None:
            value = str(Path(value).resolve())
        setattr(cfg, key, value)
    cfg.run_dir = str(Path(cfg.run_dir).resolve())
    cfg.validate()
    return cfg


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; relative paths resolve against its directory")
    p.add_argument("--run-dir", dest="run_dir", help="run directory (default: ./run)")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="rerun the requested stages, archiving earlier outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    add_dataclass_overrides(p, RunConfig, skip=_EXPLICIT)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="darkselect", description="Curate TTS training data from unvetted audio.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "screen-text": "drop groups with automated subtitles and normalize text",
        "align": "CTC-segmentation alignment and confidence filtering",
        "score": "CTC scoring from the given subtitle timings and confidence filtering",
        "screen-speaker": "VAD gate, compactness window and speaker grouping",
        "select": "evaluation-in-the-loop scoring and selection (or select on one manifest with --in)",
        "metrics": "corpus-quality metrics and the report",
        "loop": "run every stage, resuming where the run directory left off",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _common(p)
        if name == "select":
            p.add_argument("--in", dest="input", help="select on this manifest instead of the run directory")
            p.add_argument("--out", help="output manifest for --in mode")
            p.add_argument("--speaker-scores", help="speaker_id<TAB>score file for ours-spk in --in mode")
    p = sub.add_parser("synthcorpus", help="write a seeded synthetic corpus", description="write a seeded synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    hints = typing.get_type_hints(SyntheticSpec)
    for f in fields(SyntheticSpec):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", type=_converter(hints[f.name]), default=None)
    return parser


def _cmd_select_standalone(args: argparse.Namespace) -> int:
    if not args.out:
        raise ValidationError("--out is required with --in")
    base = SelectionConfig()
    over = {k: v for k, v in _overrides(args).items() if k in {f.name for f in fields(SelectionConfig)}}
    if args.seed is not None:
        over["seed"] = args.seed
    cfg = SelectionConfig(**{**base.as_dict(), **over})
    cfg.validate()
    manifest = read_manifest(args.input)
    scores = read_score_table(args.speaker_scores).scores if args.speaker_scores else None
    write_manifest(select(manifest, cfg, speaker_scores=scores), args.out)
    return EXIT_OK


def _cmd_synthcorpus(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(**_overrides(args))
    generate_corpus(spec, args.out)
    print(f"wrote synthetic corpus to {args.out}")
    return EXIT_OK


def run(args: argparse.Namespace) -> int:
    if args.command == "synthcorpus":
        return _cmd_synthcorpus(args)
    if args.command == "select" and args.input:
        return _cmd_select_standalone(args)
    stages, forced = STAGE_COMMANDS[args.command]
    cfg = build_config(args, forced)
    targets = stages if stages is not None else cfg.stages
    ctx = run_pipeline(cfg, targets, force=targets if args.force else False)
    for name in STAGES:
        if name in ctx.executed:
            log.info("stage %s done", name)
    if "metrics" in targets:
        sys.stdout.write((ctx.run_dir / "report" / "report.txt").read_text(encoding="utf-8"))
    else:
        print(f"{args.command}: {', '.join(ctx.executed) or 'nothing to do'} ({ctx.run_dir})")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except DarkselectError as exc:
        stage = getattr(exc, "stage", None)
        prefix = f"stage {stage}: " if stage else ""
        print(f"darkselect: {prefix}{exc}", file=sys.stderr)
        return EXIT_INVALID if isinstance(exc, ValidationError) else EXIT_IO
    except (ValueError, TypeError) as exc:
        print(f"darkselect: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"darkselect: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
