"""Command-line entry point: ``vdafm {gen,train,eval,ablate,grid,loho}``.

Any configuration key can be overridden as ``--section.key value`` (or
``--section.key=value``), e.g. ``--loss.lambda_cl 0.02``. Exit codes:
0 success, 2 usage or configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import experiment as ex
from .errors import ConfigError, DataError, NumericError
from .synthetic import export, generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", help="JSON config file (flat dotted keys or nested sections)")
    p.add_argument("--out", help="output directory")
    if training:
        p.add_argument("--data", help="dataset manifest; synthetic data when omitted")
        p.add_argument("--seeds", help="comma-separated seeds, e.g. 39,40,41,42")
        p.add_argument("--jobs", type=int, help="concurrent training runs")
        p.add_argument("--folds", type=int, help="k-fold cross-validation instead of a holdout split")
        p.add_argument("--preset", help="loss weight preset: setup42 or sweep-best")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vdafm", description="Tri-modal fusion experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate and export a synthetic dataset")
    _common(p, training=False)
    p.add_argument("--n", type=int, help="sample count")
    p.add_argument("--seed", type=int, help="generator seed")

    for name, text in (("train", "train over seeds (holdout or k-fold)"),
                       ("ablate", "modality and loss ablations"),
                       ("loho", "leave-one-site-out runs")):
        _common(sub.add_parser(name, help=text))

    p = sub.add_parser("grid", help="hyperparameter grid")
    _common(p)
    p.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2",
                   help="sweep values for a key; repeatable")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset manifest; defaults to the checkpoint's own data")
    p.add_argument("--out", help="also write eval.json into this directory")
    return parser


def _split_overrides(extra: Sequence[str]) -> dict:
    """Turn ``--a.b v`` / ``--a.b=v`` tokens into a flat override dict."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognised argument: {tok}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for --{key}")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def _parse_sweep(items: Sequence[str]) -> dict:
    sweep = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise UsageError(f"--sweep expects KEY=V1,V2,... (got {item!r})")
        sweep[key] = [ex._parse_scalar(v.strip()) for v in values.split(",")]
    return sweep


def resolve_config(args: argparse.Namespace, extra: Sequence[str]) -> ex.ExperimentConfig:
    layers = []
    if getattr(args, "config", None):
        layers.append(ex.load_config_file(args.config))
    cli = {}
    for key in ("out", "data", "jobs", "folds", "preset"):
        value = getattr(args, key, None)
        if value is not None:
            cli[key] = value
    if getattr(args, "seeds", None):
        try:
            cli["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"--seeds expects integers, got {args.seeds!r}") from None
    if getattr(args, "n", None) is not None:
        cli["synth.n"] = args.n
    if getattr(args, "seed", None) is not None:
        cli["synth.seed"] = args.seed
    if getattr(args, "sweep", None):
        cli["sweep"] = _parse_sweep(args.sweep)
    cli.update(_split_overrides(extra))
    layers.append(cli)
    return ex.ExperimentConfig.from_flat(layers)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen(cfg: ex.ExperimentConfig) -> None:
    problems = cfg.synth.problems()
    if problems:
        raise ConfigError(problems)
    print(export(generate(cfg.synth), cfg.out))


def cmd_train(cfg: ex.ExperimentConfig) -> None:
    body = ex.run_train(cfg)
    _print_json({"mode": body["mode"], "aggregate": body["aggregate"], "out": cfg.out})


def cmd_ablate(cfg: ex.ExperimentConfig) -> None:
    ex.run_ablate(cfg)
    print(f"{cfg.out}/ablation.csv")


def cmd_grid(cfg: ex.ExperimentConfig) -> None:
    ex.run_grid(cfg)
    print(f"{cfg.out}/grid.csv")


def cmd_loho(cfg: ex.ExperimentConfig) -> None:
    rows = ex.run_loho(cfg)
    print(f"{cfg.out}/loho.csv")
    failed = [r["site"] for r in rows if not r["audit_passed"]]
    if failed:
        print(f"leakage audit failed for: {', '.join(failed)}", file=sys.stderr)


def cmd_eval(args: argparse.Namespace) -> None:
    result = ex.run_eval(args.checkpoint, args.data)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    _print_json(result)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "ablate": cmd_ablate,
            "grid": cmd_grid, "loho": cmd_loho}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command == "eval":
            if extra:
                raise UsageError(f"unrecognised arguments: {' '.join(extra)}")
            cmd_eval(args)
        else:
            COMMANDS[args.command](resolve_config(args, extra))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
