"""Command-line interface: generate, train, calibrate, verify, report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import calibration as cal
from . import network as nn
from .pricing import PARAM_NAMES
from .verification import GRID_DIMS, POINTWISE_DIMS, SUITES, run_suite

log = logging.getLogger("hjm_energy")

OUT_ENV = "HJM_ENERGY_OUT"
THETA_COLUMNS = ["theta_a", "theta_b", "theta_k", "alpha0", "alpha1", "alpha2", "alpha3"]

DEFAULTS = {
    "generate": {"mode": "grid", "n_train": 40000, "n_test": 4000, "seed": 0, "out": None,
                 "vol_form": "exact"},
    "train": {"dataset": None, "mode": "grid", "epochs": 200, "batch_size": 30, "lr": 1e-3,
              "seed": 0, "out": None},
    "calibrate": {"weights": None, "observations": None, "mode": "exact", "epochs": 1000,
                  "batch_size": 30, "lr": 5e-3, "seed": 0, "out": None, "spread": 0.1,
                  "max_runs": None},
    "verify": {"suite": "all", "seed": 0, "full": False},
    "report": {"results": None, "out": None},
}


def fmt(value) -> str:
    return format(float(value), ".17g")


def default_out(name: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "out")) / name


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    resolved = dict(DEFAULTS[command])
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            from_file = json.load(fh)
        unknown = set(from_file) - set(resolved)
        if unknown:
            raise SystemExit(f"unknown config keys for {command}: {sorted(unknown)}")
        resolved.update(from_file)
    for key in resolved:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def config_hash(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def pricing_config(box: cal.ThetaBox, grid: cal.ContractGrid, vol_form: str) -> dict:
    return {
        "box_lower": list(box.lower), "box_upper": list(box.upper),
        "taus": list(grid.taus), "strikes": list(grid.strikes),
        "delivery_len": grid.delivery_len, "vol_form": vol_form,
        "eval_time": 0.0, "rate": 0.0, "price_floor": cal.PRICE_FLOOR,
    }


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------


def grid_header(grid: cal.ContractGrid) -> list:
    n_tau, n_k = grid.shape
    return THETA_COLUMNS + [f"p_t{i + 1}_k{j + 1}" for i in range(n_tau) for j in range(n_k)]


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_table(path) -> tuple[list, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SystemExit(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    try:
        data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise SystemExit(f"{path}: malformed CSV ({exc})") from None
    return header, data


def write_dataset(path: Path, dataset, mode: str) -> None:
    if mode == "grid":
        rows = np.column_stack([dataset.thetas, dataset.flat_prices()])
        write_rows(path, grid_header(dataset.grid), rows)
    else:
        rows = np.column_stack([dataset.thetas, dataset.taus, dataset.strikes, dataset.prices])
        write_rows(path, THETA_COLUMNS + ["tau", "strike", "price"], rows)


def detect_mode(header: list) -> str:
    if header[:7] != THETA_COLUMNS:
        raise SystemExit("dataset must start with the seven parameter columns")
    if header[7:] == ["tau", "strike", "price"]:
        return "pointwise"
    if all(h.startswith("p_t") for h in header[7:]) and len(header) > 7:
        return "grid"
    raise SystemExit("unrecognised dataset columns")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: dict) -> Path:
    if cfg["mode"] not in ("grid", "pointwise"):
        raise SystemExit("--mode must be grid or pointwise")
    if cfg["n_train"] < 1 or cfg["n_test"] < 1:
        raise SystemExit("dataset sizes must be >= 1")
    out = Path(cfg["out"] or default_out("data"))
    out.mkdir(parents=True, exist_ok=True)
    box, grid = cal.ThetaBox(), cal.ContractGrid()
    if cfg["mode"] == "grid":
        train, test = cal.gen_grid_dataset(box, grid, cfg["n_train"], cfg["n_test"], cfg["seed"],
                                           cfg["vol_form"])
    else:
        train, test = cal.gen_pointwise_dataset(box, n_train=cfg["n_train"], n_test=cfg["n_test"],
                                                seed=cfg["seed"], vol_form=cfg["vol_form"])
    write_dataset(out / "train.csv", train, cfg["mode"])
    write_dataset(out / "test.csv", test, cfg["mode"])
    pricing = pricing_config(box, grid, cfg["vol_form"])
    manifest = {"command": "generate", "config": cfg, "n_train": len(train), "n_test": len(test),
                "seed": cfg["seed"], "pricing": pricing, "pricing_hash": config_hash(pricing)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(train)} train and {len(test)} test samples to {out}")
    return out


def cmd_train(cfg: dict) -> Path:
    if cfg["dataset"] is None:
        raise SystemExit("train needs --dataset")
    if cfg["epochs"] < 1 or cfg["batch_size"] < 1:
        raise SystemExit("--epochs and --batch-size must be >= 1")
    header, data = read_table(cfg["dataset"])
    mode = detect_mode(header)
    if mode != cfg["mode"]:
        raise SystemExit(f"dataset is in {mode} mode but --mode is {cfg['mode']}")
    box = cal.ThetaBox()
    if mode == "grid":
        dims, act = GRID_DIMS, "relu"
        lo, hi = box.lo, box.hi
        x, y = data[:, :7], data[:, 7:]
        if y.shape[1] != dims[-1]:
            raise SystemExit(f"grid dataset has {y.shape[1]} prices, expected {dims[-1]}")
    else:
        dims, act = POINTWISE_DIMS, "elu"
        lo = np.concatenate([box.lo, [1 / 12, 31.6]])
        hi = np.concatenate([box.hi, [1.0, 33.2]])
        x, y = data[:, :9], data[:, 9:10]
    net = nn.init_network(dims, act, cfg["seed"], lo, hi)
    tcfg = nn.TrainingConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["seed"])
    net, trace = nn.train(net, x, y, tcfg)
    out = Path(cfg["out"] or default_out("model"))
    out.mkdir(parents=True, exist_ok=True)
    net = net.with_meta(seed=cfg["seed"])
    nn.save(net, out / "weights.json")
    write_rows(out / "loss.csv", ["epoch", "loss"], [(i + 1, v) for i, v in enumerate(trace)])
    (out / "train_config.json").write_text(
        json.dumps({"command": "train", "config": cfg, "n_params": net.n_params}, indent=2) + "\n",
        encoding="utf-8")
    print(f"trained {dims} ({net.n_params} parameters); final loss {fmt(trace[-1])}; wrote {out}")
    return out


def _grid_cells(grid: cal.ContractGrid, taus, strikes) -> np.ndarray:
    tt, kk = grid.flat_points()
    cells = []
    for tau, strike in zip(taus, strikes):
        hit = np.flatnonzero(np.isclose(tt, tau, atol=1e-9) & np.isclose(kk, strike, atol=1e-9))
        if hit.size != 1:
            raise SystemExit(f"observation (tau={tau}, strike={strike}) is not a grid point")
        cells.append(hit[0])
    cells = np.array(cells)
    if np.unique(cells).size != grid.size:
        raise SystemExit(f"grid calibration needs every one of the {grid.size} grid cells once")
    return cells


def load_observations(path, net: nn.Network, mode: str, spread: float):
    """Observation arrays (R, N) for the network type; truth is known for dataset files."""
    header, data = read_table(path)
    grid = cal.ContractGrid()
    truth = None
    if header[:7] == THETA_COLUMNS:
        if detect_mode(header) != "grid":
            raise SystemExit("only grid datasets can be used as observation sets")
        truth = data[:, :7]
        prices = data[:, 7:]
        taus = np.tile(grid.flat_points()[0], (len(data), 1))
        strikes = np.tile(grid.flat_points()[1], (len(data), 1))
        bid, ask = cal.make_bidask(prices, 1.0 - spread, 1.0 + spread)
    elif header == ["tau", "strike", "price"]:
        taus, strikes, prices = (data[:, i][None] for i in range(3))
        bid, ask = cal.make_bidask(prices, 1.0 - spread, 1.0 + spread)
    elif header == ["tau", "strike", "bid", "ask"]:
        taus, strikes, bid, ask = (data[:, i][None] for i in range(4))
        prices = 0.5 * (bid + ask)
        if mode != "bidask":
            raise SystemExit("bid/ask observations need --mode bidask")
    else:
        raise SystemExit(f"unrecognised observation columns {header}")
    if net.dims[0] == 7:
        order = np.argsort(_grid_cells(grid, taus[0], strikes[0]))
        taus, strikes, prices, bid, ask = (a[:, order] for a in (taus, strikes, prices, bid, ask))
    return taus, strikes, prices, bid, ask, truth


def cmd_calibrate(cfg: dict) -> Path:
    if cfg["weights"] is None or cfg["observations"] is None:
        raise SystemExit("calibrate needs --weights and --observations")
    if cfg["mode"] not in ("exact", "bidask"):
        raise SystemExit("--mode must be exact or bidask")
    if cfg["epochs"] < 1:
        raise SystemExit("--epochs must be >= 1")
    try:
        net = nn.load(cfg["weights"])
    except nn.SerializationError as exc:
        raise SystemExit(f"{cfg['weights']}: {exc}") from None
    taus, strikes, prices, bid, ask, truth = load_observations(cfg["observations"], net,
                                                               cfg["mode"], cfg["spread"])
    if cfg["max_runs"]:
        keep = slice(0, int(cfg["max_runs"]))
        taus, strikes, prices, bid, ask = (a[keep] for a in (taus, strikes, prices, bid, ask))
        truth = None if truth is None else truth[keep]
    box = cal.ThetaBox()
    tcfg = nn.TrainingConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["seed"])
    if net.dims[0] == 9:
        if cfg["mode"] == "bidask":
            raise SystemExit("bid-ask calibration needs a grid network")
        res = cal.calibrate_pointwise(net, taus, strikes, prices, box, tcfg)
    elif cfg["mode"] == "bidask":
        res = cal.calibrate_bidask(net, bid, ask, box, tcfg)
    else:
        res = cal.calibrate_grid(net, prices, box, tcfg)
    res = res.with_truth(truth, prices)
    try:
        rows, cols = cal.cluster_assign(taus, strikes)
        labels = {"cell_rows": rows.tolist(), "cell_cols": cols.tolist()}
    except ValueError:
        labels = {"cell_rows": None, "cell_cols": None}
    out = Path(cfg["out"] or default_out("calibration"))
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": "calibrate", "config": cfg, "seed": cfg["seed"],
        "network_dims": list(net.dims), "param_names": list(PARAM_NAMES),
        "grid_shape": list(cal.ContractGrid().shape),
        **labels,
        "theta_hat": res.theta_hat.tolist(),
        "theta_true": None if truth is None else truth.tolist(),
        "final_loss": res.loss_trace[:, -1].tolist(),
        "loss_trace": res.loss_trace.tolist(),
        "net_prices": res.net_prices.tolist(),
        "observed_prices": prices.tolist(),
        "price_rel_err": res.price_rel_err.tolist(),
        "param_rel_err": None if res.param_rel_err is None else res.param_rel_err.tolist(),
        "mismatch_before": None if res.mismatch_before is None else res.mismatch_before.tolist(),
        "mismatch_after": None if res.mismatch_after is None else res.mismatch_after.tolist(),
    }
    (out / "results.json").write_text(json.dumps(doc) + "\n", encoding="utf-8")
    print(f"calibrated {res.theta_hat.shape[0]} run(s); mean final loss "
          f"{fmt(np.mean(res.loss_trace[:, -1]))}; wrote {out / 'results.json'}")
    return out / "results.json"


def cmd_verify(cfg: dict) -> int:
    checks = run_suite(cfg["suite"], cfg["seed"], quick=not cfg["full"])
    summary = {"suite": cfg["suite"], "seed": cfg["seed"],
               "passed": all(c.passed for c in checks),
               "checks": [c.as_dict() for c in checks]}
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.value:.3e} (tol {c.tol:.0e}) {c.detail}")
    print(json.dumps(summary))
    return 0 if summary["passed"] else 1


def cell_table(values, rows, cols, shape, reducer) -> np.ndarray:
    """Aggregate per-observation values into grid cells; empty cells are NaN."""
    table = np.full(shape, np.nan)
    for i in range(shape[0]):
        for j in range(shape[1]):
            hit = (rows == i) & (cols == j)
            if np.any(hit):
                table[i, j] = reducer(values[hit])
    return table


def _write_cell_table(path: Path, table: np.ndarray, grid: cal.ContractGrid) -> None:
    header = ["tau"] + [f"K={k:g}" for k in grid.strikes]
    write_rows(path, header, [[tau] + list(row) for tau, row in zip(grid.taus, table)])


def cmd_report(cfg: dict) -> Path:
    if cfg["results"] is None:
        raise SystemExit("report needs --results")
    try:
        doc = json.loads(Path(cfg["results"]).read_text(encoding="utf-8"))
        price_err = np.array(doc["price_rel_err"], dtype=float)
    except (OSError, ValueError, KeyError) as exc:
        raise SystemExit(f"{cfg['results']}: cannot parse results ({exc})") from None
    out = Path(cfg["out"] or default_out("report"))
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if doc.get("cell_rows") is not None:
        grid = cal.ContractGrid()
        rows = np.array(doc["cell_rows"], dtype=int).ravel()
        cols = np.array(doc["cell_cols"], dtype=int).ravel()
        tables = {"price_error_mean": cell_table(price_err.ravel(), rows, cols, grid.shape, np.mean),
                  "price_error_max": cell_table(price_err.ravel(), rows, cols, grid.shape, np.max)}
        for key in ("mismatch_before", "mismatch_after"):
            if doc.get(key) is not None:
                values = np.array(doc[key], dtype=float).ravel()
                tables[key] = cell_table(values, rows, cols, grid.shape, np.mean)
        for name, table in tables.items():
            _write_cell_table(out / f"{name}.csv", table, grid)
            written.append(f"{name}.csv")
    else:
        write_rows(out / "price_error.csv", ["run", "mean", "max"],
                   [(i, r.mean(), r.max()) for i, r in enumerate(price_err)])
        written.append("price_error.csv")
    if doc.get("param_rel_err") is not None:
        rel = np.array(doc["param_rel_err"], dtype=float)
        summary = cal.param_summary(rel)
        with open(out / "parameter_error.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["parameter", "mean", "median"])
            for name in PARAM_NAMES:
                writer.writerow([name, fmt(summary[name]["mean"]), fmt(summary[name]["median"])])
        written.append("parameter_error.csv")
    manifest = {"command": "report", "config": cfg, "source_config": doc.get("config"),
                "files": written + ["theta_hat.csv"]}
    (out / "report_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    theta_hat = np.array(doc["theta_hat"], dtype=float)
    write_rows(out / "theta_hat.csv", ["run"] + list(PARAM_NAMES),
               [[i] + list(row) for i, row in enumerate(theta_hat)])
    written.append("theta_hat.csv")
    print(f"wrote {', '.join(written)} to {out}")
    return out


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hjm-energy", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with option values (flags take precedence)")
        p.add_argument("--seed", type=int)
        return p

    g = common(sub.add_parser("generate", help="write synthetic train/test price datasets"))
    g.add_argument("--mode", choices=["grid", "pointwise"])
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--out")
    g.add_argument("--vol-form", choices=["exact", "ibp"],
                   help="variance formula used for pricing (default exact)")

    t = common(sub.add_parser("train", help="fit a pricing network to a dataset"))
    t.add_argument("--dataset", help="train.csv written by generate")
    t.add_argument("--mode", choices=["grid", "pointwise"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--out")

    c = common(sub.add_parser("calibrate", help="recover model parameters from prices"))
    c.add_argument("--weights")
    c.add_argument("--observations", help="tau,strike,price / tau,strike,bid,ask CSV or a grid dataset")
    c.add_argument("--mode", choices=["exact", "bidask"])
    c.add_argument("--epochs", type=int)
    c.add_argument("--batch-size", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--spread", type=float, help="half-width of bands built from prices (default 0.1)")
    c.add_argument("--max-runs", type=int, help="calibrate only the first N rows of a dataset")
    c.add_argument("--out")

    v = common(sub.add_parser("verify", help="run property suites; nonzero exit on failure"))
    v.add_argument("--suite", choices=list(SUITES) + ["all"])
    v.add_argument("--full", action="store_true", default=None, help="use acceptance-size samples")

    r = common(sub.add_parser("report", help="CSV tables from a calibration results file"))
    r.add_argument("--results")
    r.add_argument("--out")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "calibrate": cmd_calibrate,
            "verify": cmd_verify, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = resolve_config(args.command, args)
    result = COMMANDS[args.command](cfg)
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(main())
