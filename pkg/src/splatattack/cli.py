"""Command-line entry point: ``splatattack <command> --config run.json``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .commands import COMMANDS, StageError, load_config
from .errors import ConfigError, SplatAttackError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatattack", description="Gaussian-splat attack toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", help="output directory (overrides the config's 'out')")
        p.add_argument("--seed", type=int, help="run seed, 0 <= seed < 2**64 (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="render worker threads (result is thread-count independent)")
    return parser


def _summarize(command: str, result) -> str | None:
    if command == "dagger":
        first = result["first_success"]
        return (f"final constraint norm {result['final_constraint_norm']:.6g}; "
                f"flipped={'yes' if result['flipped'] else 'no'}; first success at iteration {first}")
    if command in ("cloak", "eval"):
        lines = []
        for zone, s in sorted(result["report"].summary().items()):
            lines.append(f"{zone}: {s['poses']} poses, {s['favor_adversarial_ref']} closer to adversarial ref, "
                         f"top-1 {s['victim_top1_counts']}")
        return "\n".join(lines)
    if command == "surrogate-train":
        return f"train accuracy {result['train_accuracy']:.4f}, holdout accuracy {result['holdout_accuracy']}"
    if command == "fit":
        return f"final loss {result['final_loss']}"
    if command == "render":
        return f"wrote {len(result['images'])} images"
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        config, base = load_config(args.config)
        if args.out is not None:
            config["out"] = str(Path(args.out).resolve())
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be in [0, 2**64)")
            config["seed"] = args.seed
        result = COMMANDS[args.command](config, base, args.threads)
    except ConfigError as exc:
        print(f"splatattack {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        code = EXIT_CONFIG if isinstance(exc.cause, ConfigError) else EXIT_RUNTIME
        print(f"splatattack {args.command}: {exc}", file=sys.stderr)
        return code
    except (SplatAttackError, OSError) as exc:
        print(f"splatattack {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    text = _summarize(args.command, result)
    if text:
        print(text)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
