"""Command-line wrapper exposing the mock scorer through the scorer contract.

    python -m darkselect.mock_scorer --manifest M --sentences ID --out O [--seed N] [--sigma S]
"""

from __future__ import annotations

import argparse
import sys

from .errors import DarkselectError
from .manifest import read_manifest
from .scoring import mock_speaker_scorer, write_score_table


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--sentences", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--sigma", type=float, default=0.1)
    args = parser.parse_args(argv)
    try:
        manifest = read_manifest(args.manifest)
        table = mock_speaker_scorer(manifest, seed=args.seed, sigma=args.sigma, sentence_set_id=args.sentences)
        write_score_table(table, args.out)
    except (DarkselectError, OSError) as exc:
        print(f"mock_scorer: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
