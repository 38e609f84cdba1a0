"""Command-line entry point: ``loadshed <command> [options]``.

Commands
--------
parse      validate a case file and summarise it
pf         AC power flow (optionally after an outage)
ols        DC optimal load shedding for one contingency and load profile
gen-data   simulate per-bus datasets from a study config
train      fit one alpha model per bus on generated datasets
predict    apply trained models to measurement files
identify   local identifiability of a contingency list
report     error statistics over a training run

Primary outputs are deterministic; wall-clock timings go to separate files.
Exit codes: 0 success, 2 usage or config error, 3 missing or malformed
input file, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, fields
from pathlib import Path

import numpy as np

from . import identifiability as ident
from .casefile import CaseFormatError, load_case
from .config import ConfigError, StudyConfig, load_config, parse_buses
from .learning.dataset import (
    DatasetGenerationError, BusDataset, datasets_hash, generate_dataset, learning_buses,
    worker_count, write_datasets,
)
from .learning.features import FeatureLayout
from .learning.train import (
    Hyper, RegressionMetrics, TrainingError, load_model, predict, save_model, score,
    split_indices, train_bus_model,
)
from .network import CaseValidationError
from .ols import recover_shedding, solution_csv, solve_case
from .powerflow import Contingency, IslandingError, solve_ac, top_flow_contingencies

logger = logging.getLogger("loadshed")

EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 2, 3, 4
METRIC_COLUMNS = [f.name for f in fields(RegressionMetrics)]


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _write(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _case(args):
    if getattr(args, "config", None):
        return _config(args).load_case()
    if not args.case:
        raise CliError("--case or --config is required", EXIT_USAGE)
    return load_case(args.case)


def _config(args) -> StudyConfig:
    if not args.config:
        raise CliError("--config is required", EXIT_USAGE)
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "case", None):
        cfg.case = args.case
    if getattr(args, "buses", None):
        cfg.buses = args.buses
    return cfg


def _outage(text: str | None) -> Contingency | None:
    if not text:
        return None
    try:
        ids = tuple(int(b) for b in text.split(",") if b.strip())
    except ValueError as exc:
        raise CliError(f"--outage expects comma-separated branch ids, got {text!r}",
                       EXIT_USAGE) from exc
    return Contingency("L" + "+".join(map(str, ids)), ids)


def _out_path(args, default_name: str) -> Path | None:
    if not args.out:
        return None
    p = Path(args.out)
    return p / default_name if p.suffix == "" else p


# -- commands --------------------------------------------------------------

def cmd_parse(args) -> int:
    case = _case(args)
    pd, _ = case.demand_pu()
    rows = [
        ("name", case.name), ("base_mva", case.base_mva), ("buses", case.n_bus),
        ("branches", case.n_branch), ("limited_branches", sum(b.limited for b in case.branches)),
        ("generators", len(case.conventional_generators)),
        ("load_buses", len(case.load_buses)), ("load_centres", len(learning_buses(case))),
        ("flexibility_costs", len(case.costs)), ("slack_bus", case.slack_bus),
        ("total_demand_mw", float(pd.sum() * case.base_mva)),
        ("connected", case.is_connected()),
    ]
    _write(_out_path(args, "case_report.csv"), _csv(["field", "value"],
                                                   [(k, _fmt(v)) for k, v in rows]))
    return 0


def cmd_pf(args) -> int:
    case = _case(args)
    cont = _outage(args.outage)
    pre = solve_ac(case, enforce_q_limits=args.q_limits)
    state = pre if cont is None else solve_ac(case, cont, start=pre,
                                               enforce_q_limits=args.q_limits)
    base = case.base_mva
    bus_rows = [(b.id, _fmt(state.v_mag[i]), _fmt(float(np.degrees(state.v_ang[i]))),
                 _fmt(state.p_inj[i] * base), _fmt(state.q_inj[i] * base))
                for i, b in enumerate(case.buses)]
    br_rows = [(br.id, br.from_bus, br.to_bus) + tuple(_fmt(v * base)
                                                       for v in state.branch_flows[k])
               for k, br in enumerate(case.branches)]
    text = _csv(["bus", "v_pu", "angle_deg", "p_inj_mw", "q_inj_mvar"], bus_rows)
    text += "\n" + _csv(["branch", "from", "to", "p_from_mw", "q_from_mvar", "p_to_mw",
                         "q_to_mvar"], br_rows)
    text += "\n" + _csv(["converged", "iterations", "max_mismatch_pu"],
                        [(int(state.converged), state.iterations, _fmt(state.max_mismatch))])
    _write(_out_path(args, "power_flow.csv"), text)
    if not state.converged:
        raise CliError(f"AC power flow did not converge (mismatch {state.max_mismatch:.3e})",
                       EXIT_NUMERIC)
    return 0


def _multipliers(text: str | None, case) -> np.ndarray:
    if not text:
        return np.ones(case.n_bus)
    p = Path(text)
    if p.exists():
        rows = list(csv.reader(io.StringIO(p.read_text(encoding="utf-8"))))
        m = np.ones(case.n_bus)
        for r in rows[1:]:
            m[case.bus_index[int(r[0])]] = float(r[1])
        return m
    try:
        return np.full(case.n_bus, float(text))
    except ValueError as exc:
        raise CliError(f"--multipliers: {text!r} is neither a file nor a number",
                       EXIT_INPUT) from exc


def cmd_ols(args) -> int:
    case = _case(args)
    cont = _outage(args.outage)
    pd = case.demand_pu()[0] * case.base_mva * _multipliers(args.multipliers, case)
    sol = solve_case(case, cont, pd)
    _write(_out_path(args, "ols.csv"), solution_csv(sol))
    if not sol.optimal:
        raise CliError(f"OLS solve ended with status {sol.status.value}", EXIT_NUMERIC)
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    case = cfg.load_case()
    conts = cfg.contingencies(case)
    buses = cfg.bus_selection(case, learning_buses(case))
    out = Path(args.out) if args.out else cfg.out_dir()
    datasets, log = generate_dataset(
        case, conts, cfg.samples_per_contingency, cfg.perturb_range, cfg.seed, buses,
        f0=cfg.f0, k_sys=cfg.k_sys,
    )
    write_datasets(datasets, out / "datasets")
    _write(out / "generation_log.csv", log.to_csv())
    _write(out / "contingencies.csv", _csv(
        ["contingency_id", "branches"],
        [(c.id, " ".join(map(str, c.outaged_branches))) for c in conts]))
    _write(out / "dataset_hash.txt", datasets_hash(datasets) + "\n")
    logger.info("wrote %d bus datasets to %s", len(datasets), out)
    return 0


def _train_one(job):
    ds, hyper, cost = job
    t0 = time.perf_counter()
    model, metrics = train_bus_model(ds, hyper, cost)
    return model, metrics, time.perf_counter() - t0


def _read_datasets(case, data_dir: Path, buses) -> dict[int, BusDataset]:
    out = {}
    for b in buses:
        p = data_dir / f"bus_{b}.csv"
        if not p.exists():
            raise CliError(f"missing dataset file {p}", EXIT_INPUT)
        out[b] = BusDataset.from_csv(p.read_text(encoding="utf-8"), FeatureLayout.for_bus(case, b))
    return out


def _test_rows(model, ds: BusDataset):
    """Rows held out when ``model`` was trained, reproduced from its recorded hyperparameters."""
    h = dict(kv.split("=", 1) for kv in model.meta["hyper"].split(";"))
    hyper = Hyper(train_fraction=float(h["train_fraction"]),
                  val_fraction=float(h["val_fraction"]), split_seed=int(h["split_seed"]))
    return split_indices(len(ds), hyper)[2]


def _data_dir(path: Path) -> Path:
    return path / "datasets" if (path / "datasets").is_dir() else path


def _dataset_buses(data_dir: Path) -> list[int]:
    return sorted(int(p.stem.split("_")[1]) for p in data_dir.glob("bus_*.csv"))


def cmd_train(args) -> int:
    cfg = _config(args)
    case = cfg.load_case()
    out = Path(args.out) if args.out else cfg.out_dir()
    data_dir = _data_dir(Path(args.data) if args.data else out)
    available = _dataset_buses(data_dir)
    if not available:
        raise CliError(f"no bus_*.csv datasets in {data_dir}", EXIT_INPUT)
    buses = cfg.bus_selection(case, available)
    datasets = _read_datasets(case, data_dir, buses)
    jobs = [(datasets[b], cfg.hyper, case.cost_by_bus.get(b)) for b in buses]
    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    model_dir = out / "models"
    model_dir.mkdir(parents=True, exist_ok=True)
    rows, timing, preds = [], [], []
    for (model, metrics, seconds), b in zip(results, buses):
        save_model(model, model_dir / f"bus_{b}.model")
        rows.append([_fmt(v) for v in astuple(metrics)])
        timing.append((b, f"{seconds:.3f}"))
        preds += _prediction_rows(model, datasets[b], _test_rows(model, datasets[b]))
    _write(out / "metrics.csv", _csv(METRIC_COLUMNS, rows))
    _write(out / "test_predictions.csv", _csv(PRED_COLUMNS, preds))
    _write(out / "timing.csv", _csv(["bus", "train_seconds"], timing))
    return 0


PRED_COLUMNS = ["bus", "row", "contingency_id", "seed", "alpha_hat", "p_hat", "alpha", "p_shed"]


def _prediction_rows(model, ds: BusDataset, rows) -> list:
    rows = np.asarray(rows, dtype=int)
    a_hat = predict(model, ds.X[rows]) if len(rows) else np.zeros(0)
    out = []
    for r, a in zip(rows, a_hat):
        p = recover_shedding(a, model.cost) if model.cost is not None else float("nan")
        out.append((ds.bus, int(r), ds.contingency_ids[r], int(ds.seeds[r]), _fmt(a), _fmt(p),
                    _fmt(ds.y[r]), _fmt(ds.p_shed[r])))
    return out


def cmd_predict(args) -> int:
    if not args.models or not args.measurements:
        raise CliError("--models and --measurements are required", EXIT_USAGE)
    model_dir = Path(args.models)
    model_dir = model_dir / "models" if (model_dir / "models").is_dir() else model_dir
    meas = Path(args.measurements)
    files = sorted(_data_dir(meas).glob("bus_*.csv")) if meas.is_dir() else [meas]
    if not files:
        raise CliError(f"no measurement files in {meas}", EXIT_INPUT)
    preds, metrics = [], []
    for f in files:
        bus = int(f.stem.split("_")[1])
        mp = model_dir / f"bus_{bus}.model"
        if not mp.exists():
            raise CliError(f"no model for bus {bus} in {model_dir}", EXIT_INPUT)
        model = load_model(mp)
        ds = _read_measurements(f, model.layout)
        rows = _test_rows(model, ds) if args.split == "test" else np.arange(len(ds))
        preds += _prediction_rows(model, ds, rows)
        if np.all(np.isfinite(ds.y)):
            metrics.append([_fmt(v) for v in astuple(score(model, ds, rows))])
    out = Path(args.out) if args.out else None
    if out is None:
        sys.stdout.write(_csv(PRED_COLUMNS, preds))
    else:
        _write(out / "predictions.csv", _csv(PRED_COLUMNS, preds))
        if metrics:
            metrics.sort(key=lambda r: int(r[0]))
            _write(out / "metrics.csv", _csv(METRIC_COLUMNS, metrics))
    return 0


def _read_measurements(path: Path, layout: FeatureLayout) -> BusDataset:
    """Dataset CSV, or a bare feature CSV (header = feature names, no label columns)."""
    text = path.read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if rows and rows[0] == layout.names:
        X = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(layout))
        n = len(X)
        return BusDataset(layout, X, np.full(n, np.nan), np.full(n, np.nan), [""] * n,
                          np.zeros(n, int))
    try:
        return BusDataset.from_csv(text, layout)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT) from exc


def cmd_identify(args) -> int:
    case = _case(args)
    if args.config:
        cfg = _config(args)
        conts = cfg.contingencies(case)
        bus_text = cfg.buses
    else:
        conts = _contingency_list(args.contingencies, case)
        bus_text = args.buses or "all"
    buses = parse_buses(bus_text, case, case.load_buses)
    reports = [ident.check_set(case, b, conts, args.tol) for b in buses]
    _write(_out_path(args, "identifiability.csv"), ident.report_csv(reports))
    return 0


def _contingency_list(text: str | None, case):
    """``top:1,1,2`` or explicit sets ``38+141;8;51``."""
    if not text:
        raise CliError("--contingencies or --config is required", EXIT_USAGE)
    if text.startswith("top:"):
        return top_flow_contingencies(case, [int(s) for s in text[4:].split(",")])
    out = []
    for part in text.split(";"):
        ids = tuple(int(b) for b in part.split("+"))
        out.append(Contingency("L" + "+".join(map(str, ids)), ids))
    return out


def cmd_report(args) -> int:
    src = Path(args.metrics)
    pred_file = src / "test_predictions.csv" if src.is_dir() else src
    if not pred_file.exists():
        raise CliError(f"missing {pred_file}", EXIT_INPUT)
    rows = list(csv.DictReader(io.StringIO(pred_file.read_text(encoding="utf-8"))))
    per_bus: dict[int, list[tuple[float, float, float]]] = {}
    for r in rows:
        per_bus.setdefault(int(r["bus"]), []).append(
            (abs(float(r["p_hat"]) - float(r["p_shed"])),
             abs(float(r["alpha_hat"]) - float(r["alpha"])), abs(float(r["alpha"]))))
    header = ["bus", "n", "p_err_min", "p_err_q1", "p_err_median", "p_err_q3", "p_err_max",
              "p_err_mean", "alpha_err_mean", "alpha_err_pct"]
    table = []
    for b in sorted(per_bus):
        e = np.array(per_bus[b])
        q = np.percentile(e[:, 0], [0, 25, 50, 75, 100])
        pct = 100 * e[:, 1].sum() / e[:, 2].sum() if e[:, 2].sum() > 0 else float("nan")
        table.append([b, len(e)] + list(q) + [e[:, 0].mean(), e[:, 1].mean(), pct])
    arr = np.array([t[2:] for t in table], dtype=float)
    all_e = np.array([v for b in per_bus for v in per_bus[b]])
    summary = ["all", len(all_e)] + list(np.nanmean(arr[:, :5], axis=0)) + [
        all_e[:, 0].mean(), all_e[:, 1].mean(), 100 * all_e[:, 1].sum() / all_e[:, 2].sum()]
    body = [[_fmt(v) for v in t] for t in table + [summary]]
    out = Path(args.out) if args.out else None
    text = _csv(header, body)
    if out is None:
        sys.stdout.write(text)
    else:
        _write(out / "summary.csv", text)
    if args.table:
        sys.stdout.write(_plain_table(header, table + [summary]))
    return 0


def _plain_table(header, rows) -> str:
    cells = [header] + [[str(r[0]), str(r[1])] + [f"{v:.4f}" for v in r[2:]] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    lines = ["  ".join(c[i].rjust(widths[i]) for i in range(len(header))) for c in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


COMMANDS = {
    "parse": cmd_parse, "pf": cmd_pf, "ols": cmd_ols, "gen-data": cmd_gen_data,
    "train": cmd_train, "predict": cmd_predict, "identify": cmd_identify, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loadshed", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_text, *opts):
        p = sub.add_parser(name, help=help_text)
        for o in opts:
            {
                "config": lambda: p.add_argument("--config", help="study config file"),
                "case": lambda: p.add_argument("--case", help="case file or bundled name"),
                "out": lambda: p.add_argument("--out", help="output file or directory"),
                "seed": lambda: p.add_argument("--seed", type=int,
                                               help="master seed (overrides config)"),
                "buses": lambda: p.add_argument("--buses", help="comma list of bus ids or 'all'"),
                "tol": lambda: p.add_argument("--tol", type=float, default=ident.IDENT_TOL,
                                              help="identifiability tolerance on 1 - sigma"),
                "outage": lambda: p.add_argument("--outage",
                                                 help="comma-separated outaged branch ids"),
            }[o]()
        return p

    add("parse", "validate a case file", "case", "config", "out")
    p = add("pf", "AC power flow report", "case", "config", "out", "outage")
    p.add_argument("--q-limits", action="store_true", help="switch PV buses at Q limits")
    p = add("ols", "DC optimal load shedding", "case", "config", "out", "outage")
    p.add_argument("--multipliers", help="scalar load multiplier or CSV file (bus,multiplier)")
    add("gen-data", "generate per-bus datasets", "config", "case", "out", "seed", "buses")
    p = add("train", "train per-bus models", "config", "case", "out", "seed", "buses")
    p.add_argument("--data", help="dataset directory (default: <out>/datasets)")
    p = add("predict", "predict alpha and shedding", "out")
    p.add_argument("--models", help="model directory")
    p.add_argument("--measurements", help="measurement CSV or directory of bus_<id>.csv")
    p.add_argument("--split", choices=("all", "test"), default="all",
                   help="rows to predict: all, or the rows held out during training")
    p = add("identify", "identifiability report", "case", "config", "out", "buses", "tol")
    p.add_argument("--contingencies", help="'top:1,1,1,2,2' or explicit sets like '8;38+141'")
    p = add("report", "error statistics of a training run", "out")
    p.add_argument("--metrics", required=True, help="training output directory")
    p.add_argument("--table", action="store_true", help="also print a plain-text table")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args) or 0
    except CliError as exc:
        err, code = str(exc), exc.code
    except ConfigError as exc:
        err, code = f"config: {exc}", EXIT_USAGE
    except (FileNotFoundError, CaseFormatError, CaseValidationError) as exc:
        err, code = f"input: {exc}", EXIT_INPUT
    except (IslandingError, DatasetGenerationError, TrainingError,
            np.linalg.LinAlgError) as exc:
        err, code = f"numerical: {exc}", EXIT_NUMERIC
    except (KeyError, ValueError) as exc:
        err, code = f"input: {exc}", EXIT_INPUT
    print(f"loadshed {args.command}: error: {err}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
