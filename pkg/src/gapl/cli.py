"""Command-line entry point: gen, train, eval, gradcheck, ablate, dump-anchors, hm."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint, write_anchors
from .config import TrainConfig, parse_streams
from .data import GenSpec, generate, merge, read_features, write_features
from .errors import FormatError, GaplError, NumericError, UsageError
from .evaluate import (Split, dump_anchors, evaluate, format_report, harmonic_mean, load_model,
                       rows_to_csv, run_ablation)
from .harness import gradcheck

log = logging.getLogger("gapl")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_json(path, what: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{what} is not valid UTF-8 JSON: {exc}") from None


def _config(args) -> TrainConfig:
    raw = _read_json(args.config, "config") if getattr(args, "config", None) else {}
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    cfg = TrainConfig.from_dict(raw)
    if getattr(args, "streams", None):
        cfg = cfg.with_overrides(active_streams=parse_streams(args.streams))
    return cfg


def _split(path, M: int) -> Split | None:
    if path is None:
        return None
    raw = _read_json(path, "split manifest")
    if isinstance(raw, dict):
        raw = raw.get("base")
    if not isinstance(raw, list):
        raise UsageError("split manifest must be a JSON list of base class ids")
    return Split.from_base(raw, M)


def _test_path(out: Path) -> Path:
    return out.with_name(out.stem + ".test" + out.suffix)


def cmd_gen(args) -> int:
    raw = _read_json(args.spec, "spec") if args.spec else {}
    spec = GenSpec.from_dict(raw)
    gen = generate(spec)
    out = Path(args.out)
    write_features(out, gen.train)
    test = merge([gen.test[k] for k in sorted(gen.test)])
    write_features(_test_path(out), test)
    print(f"wrote {len(gen.train)} train samples to {out} and {len(test)} test samples to {_test_path(out)}")
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    data = read_features(args.data)
    cfg = _config(args)
    split = _split(args.split, data.M)
    if split is not None:
        data = data.subset(np.isin(data.labels, split.base))
    result = train(data, cfg)
    save_checkpoint(args.out, result.checkpoint)
    history = [e.to_dict() for e in result.log]
    if args.log:
        Path(args.log).write_text(json.dumps(history, indent=1) + "\n", encoding="utf-8")
    for e in result.log:
        accs = " ".join(f"{k}={v:.2f}" for k, v in e.acc.items())
        print(f"epoch {e.epoch:3d}  L_total {e.loss:.6f}  {accs}")
    print(f"config {cfg.hash()}  checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    data = read_features(args.data)
    model = load_model(load_checkpoint(args.ckpt), data)
    streams = parse_streams(args.streams) if args.streams else None
    domains = tuple(int(x) for x in args.gap_domains.split(",")) if args.gap_domains else (0, 1)
    if len(domains) != 2:
        raise UsageError("--gap-domains takes two domain ids")
    rep = evaluate(model, data, alpha=args.alpha, streams=streams, split=_split(args.split, data.M),
                   gap_domains=domains)
    text = format_report(rep)
    if args.report:
        Path(args.report).write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        Path(args.report).with_suffix(".txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    seeds = _seeds(args.seed)
    failed = []
    for seed in seeds:
        rep = gradcheck(seed=seed, tol=args.tol)
        cells = "  ".join(f"{g}={e:.2e}" for g, e in rep.groups.items())
        print(f"seed {seed}: {'PASS' if rep.passed else 'FAIL'}  {cells}  ({rep.seconds:.2f}s)")
        failed += [(seed, g) for g in rep.failed]
    if failed:
        groups = sorted({g for _, g in failed})
        raise NumericError(f"gradient check failed for group(s) {', '.join(groups)} at tol {args.tol}")
    return 0


def _seeds(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out += list(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def cmd_ablate(args) -> int:
    train_data = read_features(args.data)
    test_path = Path(args.test) if args.test else _test_path(Path(args.data))
    test_data = read_features(test_path) if test_path.exists() else train_data
    grid = None
    if args.grid:
        items = args.grid.split(";") if args.suite == "streams" else args.grid.split(",")
        grid = [float(x) for x in items] if args.suite == "alpha" else items
    columns, rows = run_ablation(args.suite, train_data, test_data, _config(args), grid)
    table = rows_to_csv(columns, rows)
    Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_dump_anchors(args) -> int:
    data = read_features(args.data)
    model = load_model(load_checkpoint(args.ckpt), data)
    write_anchors(args.out, dump_anchors(model, data, args.alpha))
    print(f"wrote anchors for {len(data)} samples to {args.out}")
    return 0


def cmd_hm(args) -> int:
    print(f"{harmonic_mean(args.base, args.novel):.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gapl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen", help="generate a synthetic multi-domain dataset")
    s.add_argument("--spec", help="GenSpec JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", help="train a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--streams")
    s.add_argument("--split", help="JSON list of base class ids; training keeps only these")
    s.add_argument("--log", help="write per-epoch statistics as JSON")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--alpha", type=float)
    s.add_argument("--streams")
    s.add_argument("--split")
    s.add_argument("--gap-domains", help="two domain ids for the centroid gaps (default 0,1)")
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check on the tiny instance")
    s.add_argument("--seed", default="0", help="seed, list or range such as 0-9")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="run an ablation suite")
    s.add_argument("--suite", required=True, choices=["streams", "alpha", "descriptor"])
    s.add_argument("--data", required=True)
    s.add_argument("--test", help="test features (default: <data stem>.test.gfea, else the training data)")
    s.add_argument("--config")
    s.add_argument("--grid", help="alpha: 0.1,0.5; descriptor: diag,full; streams: g;g,s")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("dump-anchors", help="export per-sample anchors")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--alpha", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dump_anchors)

    s = sub.add_parser("hm", help="harmonic mean of base and novel accuracy")
    s.add_argument("--base", type=float, required=True)
    s.add_argument("--novel", type=float, required=True)
    s.set_defaults(func=cmd_hm)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError("a subcommand is required (gen, train, eval, gradcheck, ablate, dump-anchors, hm)")
        return args.func(args)
    except GaplError as exc:
        print(f"gapl: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"gapl: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"gapl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
