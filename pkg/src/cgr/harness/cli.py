"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (config, data, checkpoint), 2 numerical
failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .. import plotting
from ..config import ConfigError, RunConfig
from ..metrics import ROW_FIELDS
from ..numerics import ArchiveError
from ..scene_synth import DatasetError, RankTable, SceneConfig, build_rank_table, generate_dataset, load_dataset, save_dataset

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("cgr")


def _parse_values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad value list {text!r}") from exc


def cmd_generate(args) -> int:
    table_path = Path(args.table) if args.table else Path(args.out).with_suffix(".table.json")
    if table_path.exists():
        table = RankTable.load(table_path)
    else:
        table = build_rank_table(args.table_seed if args.table_seed is not None else args.seed, args.affordances, args.contexts, args.categories)
        table_path.parent.mkdir(parents=True, exist_ok=True)
        table.save(table_path)
    data = generate_dataset(args.seed, args.n, table, SceneConfig())
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(data, args.out)
    print(f"wrote {len(data)} scenes to {args.out} (table {table_path})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = RunConfig.load(args.config)
    if args.iterations is not None:
        cfg = cfg.replace(iterations=args.iterations)
    result = train(cfg, args.out)
    plotting.plot_trace(result.trace, Path(args.out) / "trace.png")
    last = result.trace[-1]
    print(f"trained {last['iteration']} iterations, final loss {last['total']:.4f}, theta_rel {result.model.theta_rel:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate, write_report
    from .train import load_model

    cfg = RunConfig.load(args.config) if args.config else None
    model = load_model(args.ckpt, cfg)
    data = load_dataset(args.data)
    report = evaluate(model, data)
    rows = write_report(report, args.report)
    plotting.plot_metrics(report.per_task, Path(args.report).with_suffix(".png"))
    print(json.dumps({k: v for k, v in report.aggregates().items()}, indent=2))
    print(f"report: {args.report} (rows {rows})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import ablate_rho

    cfg = RunConfig.load(args.config)
    if args.iterations is not None:
        cfg = cfg.replace(iterations=args.iterations)
    rows = ablate_rho(cfg, args.values)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"kind": "rho_sweep", "rows": rows}, indent=2))
    plotting.plot_rho_sweep(rows, out.with_suffix(".png"))
    for r in rows:
        print(f"rho={r['rho']:g} ari={r['ari']} ssor={r['ssor']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import run_suite

    results = run_suite(args.scope, n_points=args.points, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _report_table(doc) -> tuple[str, list[dict], list[str]]:
    """Flatten any report document into (kind, rows, columns)."""
    if isinstance(doc, list) and doc and "iteration" in doc[0]:
        cols = list(doc[0])
        return "trace", doc, cols
    if isinstance(doc, dict) and doc.get("kind") == "rho_sweep":
        rows = doc["rows"]
        return "rho_sweep", rows, list(rows[0]) if rows else ["rho"]
    if isinstance(doc, dict) and "per_task" in doc:
        rows = [{"task": t, **vals} for t, vals in sorted(doc["per_task"].items())]
        rows.append({"task": "all", **{k: doc.get(k) for k in ("map50", "ssor", "sa_sor", "ari", "task_acc", "task_recall")}, "n_pairs": doc.get("n_pairs")})
        return "metrics", rows, ["task", "map50", "ssor", "sa_sor", "ari", "task_acc", "task_recall", "n_pairs"]
    raise ValueError("unrecognised report document (expected a metric report, trace, or rho sweep)")


def cmd_report(args) -> int:
    src = Path(args.inp)
    try:
        doc = json.loads(src.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{src}: invalid JSON ({exc.msg})") from exc
    kind, rows, cols = _report_table(doc)
    if args.format == "json":
        text = json.dumps(rows, indent=2)
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else r.get(k) for k in cols})
        text = buf.getvalue()
    base = Path(args.out) if args.out else src.with_suffix(f".table.{args.format}")
    base.parent.mkdir(parents=True, exist_ok=True)
    base.write_text(text)
    fig = base.with_suffix(".png")
    if kind == "trace":
        plotting.plot_trace(rows, fig)
    elif kind == "rho_sweep":
        plotting.plot_rho_sweep(rows, fig)
    else:
        plotting.plot_metrics(doc["per_task"], fig)
    print(f"wrote {base} and {fig}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cgr", description="Task-conditioned affordance group ranking on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="draw a synthetic dataset (and its rank table)")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n", type=int, required=True, help="number of scenes")
    g.add_argument("--out", required=True, help="output JSONL path")
    g.add_argument("--table", help="rank table JSON; reused if it exists, else created (default: <out>.table.json)")
    g.add_argument("--table-seed", type=int, help="seed for a new rank table (default: --seed)")
    g.add_argument("--affordances", type=int, default=2)
    g.add_argument("--contexts", type=int, default=2)
    g.add_argument("--categories", type=int, default=8)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--iterations", type=int, help="override config iterations")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="JSON report path; rows CSV and figure go alongside")
    e.add_argument("--config", help="optional config; its dimensions must match the checkpoint")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate-rho", help="train and evaluate once per rho value")
    a.add_argument("--config", required=True)
    a.add_argument("--values", type=_parse_values, required=True, help="e.g. 0,0.5,1")
    a.add_argument("--out", default="rho_sweep.json")
    a.add_argument("--iterations", type=int)
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--scope", choices=("ops", "model", "all"), default="all")
    c.add_argument("--points", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    r = sub.add_parser("report", help="tabulate a report/trace/sweep JSON and render its figure")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--format", choices=("json", "csv"), default="csv")
    r.add_argument("--out", help="output table path (figure is written next to it)")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    from .train import NumericalError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, ArchiveError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
