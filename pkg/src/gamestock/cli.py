"""``gamestock <generate|train|evaluate|predict|graph-stats> --config cfg.yaml [--set k=v]...``"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import pandas as pd

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .game import load_events
from .graph import build_graph, format_report, graph_statistics, load_holdings, load_industry_map
from .market_data import load_panel, label_matrix
from .metrics import evaluate as evaluate_report, labels_frame
from .synthetic import FILES, SyntheticSpec, generate, write_bundle
from .training import fit, load_checkpoint, predict, save_checkpoint, split_from_config, write_log

log = logging.getLogger("gamestock")

COMMANDS = ("generate", "train", "evaluate", "predict", "graph-stats")
DEFAULT_INPUTS = {"panel": FILES["panel"], "industries": FILES["industries"], "holdings": FILES["holdings"],
                  "events": FILES["events"], "checkpoint": "checkpoint.pt", "predictions": "predictions.csv"}


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """One invocation: resolved config, run directory, inputs read and outputs written."""

    def __init__(self, command: str, cfg: RunConfig, run_dir: Path):
        self.command, self.cfg, self.dir = command, cfg, run_dir
        self.inputs: dict[str, Path] = {}
        self.outputs: dict[str, Path] = {}

    def input(self, key: str, required: bool = True) -> Path | None:
        given = getattr(self.cfg.data, key)
        path = Path(given) if given else self.dir / DEFAULT_INPUTS[key]
        if not path.exists():
            if required:
                raise FileNotFoundError(f"data.{key}: {path} does not exist")
            return None
        self.inputs[key] = path
        return path

    def output(self, name: str) -> Path:
        path = self.dir / name
        self.outputs[name] = path
        return path

    def write_manifest(self) -> Path:
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg.train.seed,
            "config": self.cfg.to_dict(),
            "inputs": {k: {"path": str(p), "sha256": sha256(p)} for k, p in sorted(self.inputs.items())},
            "outputs": {k: {"path": str(p), "sha256": sha256(p)} for k, p in sorted(self.outputs.items()) if p.exists()},
        }
        path = self.dir / f"manifest-{self.command}.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n")
        return path

    # shared loaders
    def panel(self):
        return load_panel(self.input("panel"))

    def graph(self, stocks):
        hold_path = self.input("holdings", required=False)
        holdings = load_holdings(hold_path) if hold_path else None
        return build_graph(stocks, load_industry_map(self.input("industries")), holdings)

    def events(self, panel):
        path = self.input("events", required=False)
        return load_events(path, panel.dates) if path else None


def cmd_generate(run: Run) -> int:
    s = run.cfg.synthetic
    spec = SyntheticSpec(n_stocks=s.n_stocks, n_industries=s.n_industries, n_days=s.n_days,
                         noise_scale=s.noise_scale, event_rate=s.event_rate, event_impact=s.event_impact,
                         event_decay=s.event_decay, industry_scale=s.industry_scale,
                         industry_persistence=s.industry_persistence, seed=run.cfg.train.seed,
                         start_date=s.start_date)
    bundle = generate(spec)
    for name, path in write_bundle(bundle, run.dir).items():
        run.outputs[path.name] = path
    log.info("synthetic bundle: %d stocks x %d days, %d events, oracle mean IC %.6f",
             spec.n_stocks, spec.n_days, len(bundle.events), bundle.oracle.mean_ic)
    print(f"oracle_mean_ic={bundle.oracle.mean_ic:.12g}")
    return 0


def cmd_train(run: Run) -> int:
    panel = run.panel()
    graph = run.graph(panel.stocks) if run.cfg.model.use_hgcn else None
    result, data = fit(run.cfg, panel, graph, run.events(panel))
    save_checkpoint(run.output("checkpoint.pt"), result, run.cfg, panel.stocks, graph)
    write_log(result.log, run.output("train_log.csv"))
    log.info("best epoch %d, best validation loss %.6g", result.best_epoch, result.best_valid_loss)
    print(f"best_epoch={result.best_epoch}\nbest_valid_loss={result.best_valid_loss:.12g}")
    return 0


def _test_predictions(run: Run, panel):
    ckpt = load_checkpoint(run.input("checkpoint"))
    graph = run.graph(panel.stocks) if ckpt.cfg.model.use_hgcn else None
    split = split_from_config(ckpt.cfg, panel.dates)
    start, end = split.test_range
    return predict(ckpt, panel, graph, run.events(panel), start, end)


def cmd_predict(run: Run) -> int:
    panel = run.panel()
    table = _test_predictions(run, panel)
    table.to_csv(run.output("predictions.csv"), index=False, float_format="%.17g")
    print(f"rows={len(table)}")
    return 0


def cmd_evaluate(run: Run) -> int:
    panel = run.panel()
    if run.cfg.data.predictions:
        table = pd.read_csv(run.input("predictions"), dtype={"stock_id": str}, float_precision="round_trip")
    else:
        table = _test_predictions(run, panel)
        table.to_csv(run.output("predictions.csv"), index=False, float_format="%.17g")
    y, _ = label_matrix(panel)
    labels = labels_frame(panel.stocks, panel.dates[:-1], y)
    report = evaluate_report(table, labels)
    run.output("metrics.txt").write_text(report.to_text())
    report.daily_frame().to_csv(run.output("daily_ic.csv"), index=False, float_format="%.17g")
    for key in ("IC", "RankIC", "ICIR", "RankICIR"):
        print(f"{key}={report.as_dict()[key]:.12g}")
    return 0


def cmd_graph_stats(run: Run) -> int:
    panel_path = run.input("panel", required=False)
    if panel_path is not None:
        stocks = load_panel(panel_path).stocks
    else:
        stocks = tuple(load_industry_map(run.input("industries"))["stock_id"])
    text = format_report(graph_statistics(run.graph(stocks)))
    run.output("graph_stats.txt").write_text(text)
    print(text, end="")
    return 0


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "graph-stats": cmd_graph_stats}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gamestock", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("--run-dir", type=Path, default=None,
                       help="output directory (default: <output.root>/<timestamp>-seed<seed>)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _setup_logging(run_dir: Path, verbose: bool) -> list[logging.Handler]:
    handler = logging.FileHandler(run_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    for h in (handler, console):
        root.addHandler(h)
    return [handler, console]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}" + (f" (key: {exc.key})" if exc.key else ""), file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    run_dir = args.run_dir or Path(cfg.output.root) / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg.train.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    handlers = _setup_logging(run_dir, args.verbose)
    run = Run(args.command, cfg, run_dir)
    try:
        log.info("command %s, run dir %s", args.command, run_dir)
        if args.overrides:
            log.info("overrides: %s", " ".join(args.overrides))
        log.info("resolved config:\n%s", dump_config(cfg))
        status = HANDLERS[args.command](run)
        run.write_manifest()
        return status
    except FileNotFoundError as exc:
        log.error("missing file: %s", exc)
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: diagnostic, exit 1
        log.exception("%s failed", args.command)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        for h in handlers:
            logging.getLogger().removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
