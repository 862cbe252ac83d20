"""Command-line entry points: ``mfas <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .audio import CACHE_ENV, AudioInputError
from .checkpoint import CheckpointError
from .coattention import HeadConfigError
from .config import ConfigError, RunConfig
from .data import CvConfigError, DataError, generate_toy_dataset
from .fusion import FusionConfigError, FusionStrategy, StrategyStateError
from .plotting import PlotError, export_strategy_grid
from .search import (
    ExtractorStateError,
    run_derive_train_eval,
    run_eval,
    run_search,
    strategies_from_search,
)
from .training import NumericalError, run_pretrain, write_json

log = logging.getLogger("mfas")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
USAGE_ERRORS = (ConfigError, CvConfigError, FusionConfigError, HeadConfigError)
DATA_ERRORS = (DataError, AudioInputError, CheckpointError, ExtractorStateError, StrategyStateError, PlotError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- report tables -----------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, dict):
        return json.dumps(v, sort_keys=True)
    return str(v)


def format_table(rows: list[dict], columns: list[str]) -> str:
    cells = [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths)).rstrip()
    out = [line(columns), line(["-" * w for w in widths])]
    out += [line(row) for row in cells]
    return "\n".join(out)


def report_table(report: dict) -> str:
    """Text table for any report written by this package."""
    if "folds" in report and report["folds"] and "ua" in report["folds"][0]:
        rows = [
            {
                "fold": f["fold"],
                "held_out": ",".join(f["held_out"]),
                "level": f["strategy"]["selected_level"],
                "op": f["strategy"]["ops"][f["strategy"]["selected_level"]],
                "ua": f["ua"],
                "wa": f["wa"],
            }
            for f in report["folds"]
        ]
        if report.get("mean"):
            rows.append({"fold": "mean", **report["mean"]})
        return format_table(rows, ["fold", "held_out", "level", "op", "ua", "wa"])
    if "folds" in report:
        rows = []
        for f in report["folds"]:
            s = f["strategy"]
            rows.append({"fold": f["fold"], "best_level": s["selected_level"],
                         **{lvl: s["ops"][lvl] for lvl in ("raw", "deep", "target")}})
        return format_table(rows, ["fold", "best_level", "raw", "deep", "target"])
    if "history" in report:
        hist = report["history"]
        cols = list(hist[0]) if hist else ["epoch", "loss"]
        return format_table(hist, cols)
    raise UsageError("unrecognised report layout")


# -- commands ----------------------------------------------------------------


def _load_cfg(args, mode: str, **fixed) -> RunConfig:
    kw = {k: getattr(args, k) for k in ("manifest", "out_dir", "seed") if getattr(args, k, None) is not None}
    kw.update(fixed)
    cfg = RunConfig.load(args.config, args.set or [], mode=mode, **kw)
    if not cfg.manifest:
        raise ConfigError("no manifest configured (use --manifest or manifest=...)")
    return cfg


def _emit(report: dict, path: Path) -> None:
    write_json(path, report)
    print(report_table(report))
    log.info("wrote %s", path)


def cmd_gen_toy(args) -> int:
    recs = generate_toy_dataset(
        args.out, n_utterances=args.n, seed=args.seed, rigged=args.rigged, long_prob=args.long_prob
    )
    print(f"wrote {len(recs)} utterances to {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def _pretrain(args, probe: bool) -> int:
    cfg = _load_cfg(args, "probe" if probe else "pretrain", probe=probe)
    if not cfg.checkpoint:
        cfg.checkpoint = str(cfg.path(f"{cfg.objective}.pt"))
    out = run_pretrain(cfg)
    stem = Path(cfg.checkpoint).stem
    report = {"objective": cfg.objective, "history": out["history"], "ctc_history": out["ctc_history"]}
    _emit(report, cfg.path(f"{stem}_report.json"))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _pretrain(args, probe=False)


def cmd_probe(args) -> int:
    return _pretrain(args, probe=True)


def cmd_search(args) -> int:
    cfg = _load_cfg(args, "search")
    out = run_search(cfg)
    print(report_table(out))
    return EXIT_OK


def _load_strategies(cfg: RunConfig) -> dict[int, FusionStrategy]:
    path = Path(cfg.strategy_file) if cfg.strategy_file else cfg.path("search.json")
    if not path.exists():
        raise StrategyStateError(f"no strategy file at {path}; run `search` first or set strategy_file")
    data = json.loads(path.read_text())
    if "folds" in data:
        return strategies_from_search(data)
    strat = FusionStrategy.from_dict(data)
    return {i: strat for i in range(10)}


def cmd_derive(args) -> int:
    cfg = _load_cfg(args, "derive_train")
    report = run_derive_train_eval(cfg, _load_strategies(cfg))
    print(report_table(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args, "eval")
    report = run_eval(cfg)
    print(report_table(report))
    return EXIT_OK


def cmd_plot_grid(args) -> int:
    data = json.loads(Path(args.search).read_text())
    path = export_strategy_grid(data.get("folds", []), args.out)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    print(report_table(json.loads(Path(args.report).read_text())))
    return EXIT_OK


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--manifest")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--cache-dir", help=f"spectrogram cache directory (default: ${CACHE_ENV})")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, fn, help_ in [
        ("pretrain", cmd_pretrain, "train one extractor (quantized or continuous objective)"),
        ("probe", cmd_probe, "pretrain with the detached emotion probe and per-epoch metrics"),
        ("search", cmd_search, "fusion-strategy search per fold"),
        ("derive", cmd_derive, "retrain and evaluate each fold's derived model"),
        ("eval", cmd_eval, "re-evaluate saved derived models"),
    ]:
        p = sub.add_parser(name, help=help_)
        _add_run_args(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("gen-toy", help="synthesize the toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rigged", action="store_true", help="labels carried only by the token motif")
    p.add_argument("--long-prob", type=float, default=0.0, help="share of utterances longer than one segment")
    p.set_defaults(fn=cmd_gen_toy)

    p = sub.add_parser("plot-grid", help="render per-fold strategy grids from search.json")
    p.add_argument("--search", required=True)
    p.add_argument("--out", required=True, help="image path; .svg output is byte-stable")
    p.set_defaults(fn=cmd_plot_grid)

    p = sub.add_parser("report", help="print a report JSON as a text table")
    p.add_argument("report")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.cache_dir:
        os.environ[CACHE_ENV] = args.cache_dir
    try:
        return args.fn(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"mfas: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"mfas: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DATA_ERRORS as exc:
        print(f"mfas: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
