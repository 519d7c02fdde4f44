"""Command-line front end: simulate, filter, estimate, adaptive, experiment, report.

Exit codes: 0 success, 1 a check failed, 2 invalid input (config, model or paths file).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model1, model2, model3
from .adaptive import adaptive_filter_i, adaptive_filter_ii, adaptive_filter_iii, error_process
from .config import ConfigError, RunConfig
from .model import ModelError, TimeGrid, validate_model
from .riccati import kb_filter, riccati_trace
from .sde import simulate

PATH_COLUMNS = ("t", "X", "Y", "dW", "dV")
FILTER_COLUMNS = ("t", "m", "gamma_star", "Phi_0t", "H")
ESTIMATE_COLUMNS = {
    "det_init": ("t", "theta_hat", "fisher"),
    "joint": ("t", "theta1_star", "theta2_star", "I11", "I12", "I22"),
    "random_init": ("t", "theta_star", "fisher_emp"),
}
COMPARISON_COLUMNS = ("t", "m_adaptive", "m_oracle", "err_normalized")


# ---------------------------------------------------------------------------
# Tables and their serialization
# ---------------------------------------------------------------------------


@dataclass
class Table:
    """Column data plus ``# key=value`` comment rows (metadata and status flags)."""

    name: str
    header: tuple
    columns: list
    comments: list = field(default_factory=list)

    @property
    def rows(self) -> int:
        return len(self.columns[0])


def _num(v) -> str:
    return repr(float(v))


def table_csv(tab: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(tab.header)
    cols = [np.asarray(c, dtype=float) for c in tab.columns]
    for i in range(tab.rows):
        w.writerow([_num(c[i]) for c in cols])
    for line in tab.comments:
        buf.write(f"# {line}\n")
    return buf.getvalue()


def table_json(tab: Table) -> str:
    def clean(v):
        v = float(v)
        return v if math.isfinite(v) else None

    doc = {"name": tab.name, "header": list(tab.header),
           "columns": {h: [clean(v) for v in np.asarray(c, dtype=float)] for h, c in zip(tab.header, tab.columns)},
           "comments": list(tab.comments)}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def svg_chart(tab: Table, width: int = 640, height: int = 360) -> str:
    """Static line chart of every column against the first one."""
    t = np.asarray(tab.columns[0], dtype=float)
    series = [(h, np.asarray(c, dtype=float)) for h, c in zip(tab.header[1:], tab.columns[1:])]
    finite = np.concatenate([c[np.isfinite(c)] for _, c in series] or [np.zeros(1)])
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 40
    t0, t1 = float(t[0]), float(t[-1]) if t[-1] > t[0] else float(t[0]) + 1.0

    def x(v):
        return pad + (v - t0) / (t1 - t0) * (width - 2 * pad)

    def y(v):
        return height - pad - (v - lo) / (hi - lo) * (height - 2 * pad)

    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
    stride = max(1, t.size // 2000)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{pad}" y="20" font-size="14">{tab.name}</text>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{pad}" y="{height - 10}" font-size="11">{t0:.4g}</text>',
           f'<text x="{width - pad}" y="{height - 10}" font-size="11" text-anchor="end">{t1:.4g}</text>',
           f'<text x="4" y="{pad}" font-size="11">{hi:.4g}</text>',
           f'<text x="4" y="{height - pad}" font-size="11">{lo:.4g}</text>']
    for i, (h, c) in enumerate(series):
        ok = np.isfinite(c)
        idx = np.flatnonzero(ok)[::stride]
        if idx.size == 0:
            continue
        pts = " ".join(f"{x(t[j]):.2f},{y(c[j]):.2f}" for j in idx)
        color = colors[i % len(colors)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>')
        out.append(f'<text x="{width - pad - 120}" y="{pad + 14 * i}" font-size="11" fill="{color}">{h}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit(tab: Table, out: Path, formats, plots: bool) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        p = out / f"{tab.name}.{fmt}"
        p.write_text(table_csv(tab) if fmt == "csv" else table_json(tab))
        written.append(p)
    if plots:
        p = out / f"{tab.name}.svg"
        p.write_text(svg_chart(tab))
        written.append(p)
    return written


# ---------------------------------------------------------------------------
# Paths files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathsFile:
    t: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    meta: dict


def paths_table(p, seed: int, replicate: int, kind: str) -> Table:
    nan = np.full(1, np.nan)
    dW = np.concatenate([p.dW[0], nan])
    dV = np.concatenate([p.dV[0], nan])
    meta = f"kind={kind}, seed={seed}, replicate={replicate}, y0={_num(p.y0[0])}"
    return Table("paths", PATH_COLUMNS, [p.grid.t, p.X[0], p.Y[0], dW, dV], [meta])


def _parse_meta(line: str) -> dict:
    out = {}
    for part in line.split(","):
        if "=" in part:
            k, v = part.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def read_paths(path, grid: TimeGrid) -> PathsFile:
    """Read a paths CSV and check it against the configured grid."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read paths file: {exc}") from exc
    lines = text.splitlines()
    rows = [ln for ln in lines if ln and not ln.startswith("#")]
    meta = {}
    for ln in lines:
        if ln.startswith("#"):
            meta.update(_parse_meta(ln[1:]))
    if not rows or tuple(rows[0].split(",")) != PATH_COLUMNS:
        raise ConfigError(f"paths file must start with the header {','.join(PATH_COLUMNS)}")
    try:
        data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    except ValueError as exc:
        raise ConfigError(f"malformed paths file: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != len(PATH_COLUMNS):
        raise ConfigError("malformed paths file")
    if data.shape[0] != grid.N + 1 or not np.allclose(data[:, 0], grid.t, rtol=0, atol=1e-9 * grid.T):
        raise ConfigError(f"grid mismatch: paths file has {data.shape[0]} nodes, config grid has {grid.N + 1}")
    return PathsFile(data[:, 0], data[:, 1], data[:, 2], meta)


# ---------------------------------------------------------------------------
# Library drivers
# ---------------------------------------------------------------------------


def _require_theta(spec):
    if spec.theta is None:
        raise ConfigError("model.theta (true value) is required for this command")


def filter_table(spec, X, grid: TimeGrid) -> Table:
    _require_theta(spec)
    trace = riccati_trace(spec, grid, spec.theta)
    ft = kb_filter(spec, X, grid, trace=trace)
    gamma = np.broadcast_to(trace.gamma, ft.m.shape)
    return Table("filter", FILTER_COLUMNS, [ft.t, ft.m, gamma, np.broadcast_to(ft.phi, ft.m.shape), ft.H])


def _count_status(name, mask, comments):
    n = int(np.count_nonzero(mask))
    if n:
        comments.append(f"status={name}, nodes={n}")


def estimate_table(cfg: RunConfig, spec, paths: PathsFile, grid: TimeGrid) -> Table:
    X = paths.X[None, :]
    tau = cfg.tau
    cols = ESTIMATE_COLUMNS[spec.kind]
    comments: list[str] = []
    if spec.kind == "det_init":
        rec = model1.mle_recurrent(spec, X, grid, tau)
        _count_status("clamped", rec.values[0] != rec.raw[0], comments)
        return Table("estimates", cols, [rec.t, rec.values[0], rec.fisher], comments)
    if spec.kind == "joint":
        pp = model2.preliminary_pair(X, spec, grid, tau)
        one = model2.one_step_process(spec, X, (pp.theta1, pp.theta2), tau, grid)
        if bool(pp.flat[0]):
            comments.append("status=mde_flat_objective")
        _count_status("fisher_singular_prelim_reported", ~one.valid[0], comments)
        _count_status("clamped", np.any(one.values[0] != one.raw[0], axis=-1), comments)
        I = np.broadcast_to(one.fisher.matrix, one.values.shape[:-1] + (2, 2))[0]
        v = one.values[0]
        return Table("estimates", cols, [one.t, v[:, 0], v[:, 1], I[:, 0, 0], I[:, 0, 1], I[:, 1, 1]], comments)
    one = model3.one_step_iii(spec, X, grid, tau)
    if not bool(one.informative[0]):
        comments.append("status=mme_uninformative")
    _count_status("fisher_below_floor_prelim_reported", one.fisher[0] < model3.FISHER_FLOOR, comments)
    _count_status("clamped", one.values[0] != one.raw[0], comments)
    seed = paths.meta.get("seed", "unknown")
    comments.append(f"y0={_num(paths.Y[0])}, seed={seed}")
    return Table("estimates", cols, [one.t, one.values[0], one.fisher[0]], comments)


def adaptive_run(cfg: RunConfig, spec, X, grid: TimeGrid):
    """Adaptive filter trace for one or more paths (rows of ``X``)."""
    tau = cfg.tau
    if spec.kind == "det_init":
        q = model1.quantities(spec, grid)
        rec = model1.mle_recurrent(spec, X, grid, tau, q)
        return adaptive_filter_i(spec, X, grid, rec, q)
    if spec.kind == "joint":
        pp = model2.preliminary_pair(X, spec, grid, tau)
        one = model2.one_step_process(spec, X, (pp.theta1, pp.theta2), tau, grid)
        return adaptive_filter_ii(spec, X, grid, one, cfg.tau_star)
    one = model3.one_step_iii(spec, X, grid, tau)
    return adaptive_filter_iii(spec, X, grid, one, cfg.tau_star)


def comparison_table(cfg: RunConfig, spec, paths: PathsFile, grid: TimeGrid) -> Table:
    X = paths.X[None, :]
    ad = adaptive_run(cfg, spec, X, grid)
    comments = [f"adaptive_start={_num(grid.t[ad.start])}"]
    if spec.theta is None:
        nan = np.full(ad.m.shape[-1], np.nan)
        comments.append("status=oracle_unavailable_no_true_parameter")
        return Table("comparison", COMPARISON_COLUMNS, [ad.t, ad.m[0], nan, nan], comments)
    oracle = kb_filter(spec, X, grid)
    err = error_process(ad, oracle, spec.eps)
    ref = oracle.m[0, ad.start - oracle.start:]
    if np.all(np.isfinite(paths.Y)):
        y = paths.Y[-1]
        comments.append(f"terminal_sq_error_adaptive={_num((ad.m[0, -1] - y) ** 2)}, "
                        f"terminal_sq_error_oracle={_num((ref[-1] - y) ** 2)}")
    return Table("comparison", COMPARISON_COLUMNS, [ad.t, ad.m[0], ref, err.values[0]], comments)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _validated(cfg: RunConfig):
    spec, grid = cfg.spec(), cfg.time_grid()
    validate_model(spec, grid).raise_if_invalid()
    return spec, grid


def _formats(cfg: RunConfig, args) -> list[str]:
    return [args.format] if args.format else list(cfg.output.get("formats", ["csv"]))


def _out(cfg: RunConfig, args) -> Path:
    return Path(args.out) if args.out else cfg.out_dir


def _paths_in(cfg: RunConfig, args) -> Path:
    return Path(args.paths) if args.paths else _out(cfg, args) / "paths.csv"


def _emit(cfg, args, tab: Table):
    written = emit(tab, _out(cfg, args), _formats(cfg, args), bool(cfg.output.get("plots", False)))
    print(f"{tab.name}: {tab.rows} rows -> {', '.join(str(p) for p in written)}")
    return 0


def cmd_simulate(cfg: RunConfig, args) -> int:
    spec, grid = _validated(cfg)
    _require_theta(spec)
    seed = cfg.master_seed if args.seed is None else args.seed
    p = simulate(spec, grid, seed, [args.replicate])
    return _emit(cfg, args, paths_table(p, seed, args.replicate, spec.kind))


def cmd_filter(cfg: RunConfig, args) -> int:
    spec, grid = _validated(cfg)
    paths = read_paths(_paths_in(cfg, args), grid)
    tab = filter_table(spec, paths.X[None, :], grid)
    tab.columns = [tab.columns[0]] + [np.asarray(c)[0] for c in tab.columns[1:]]
    return _emit(cfg, args, tab)


def cmd_estimate(cfg: RunConfig, args) -> int:
    spec, grid = _validated(cfg)
    return _emit(cfg, args, estimate_table(cfg, spec, read_paths(_paths_in(cfg, args), grid), grid))


def cmd_adaptive(cfg: RunConfig, args) -> int:
    spec, grid = _validated(cfg)
    return _emit(cfg, args, comparison_table(cfg, spec, read_paths(_paths_in(cfg, args), grid), grid))


def cmd_experiment(cfg: RunConfig, args) -> int:
    from .mc import run_experiment

    plan = cfg.plan(seed=args.seed, workers=args.workers)
    report = run_experiment(plan)
    out = _out(cfg, args)
    report.write(out)
    for line in report.summary_lines():
        print(line)
    suffix = f" in {sum(report.timing.values()):.1f} s"
    print(f"{'PASS' if report.passed else 'FAIL'} {plan.name}: report at {out / 'report.json'}{suffix}")
    return 0 if report.passed else 1


def cmd_report(cfg: RunConfig | None, args) -> int:
    path = Path(args.report) if args.report else (Path(args.out) if args.out else cfg.out_dir) / "report.json"
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report: {exc}") from exc
    checks = doc.get("checks", [])
    if args.format == "json":
        sys.stdout.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    elif args.format == "csv":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["name", "anchor", "passed", "tolerance"])
        for c in checks:
            w.writerow([c["name"], c["anchor"], c["passed"], c["tolerance"]])
    else:
        for c in checks:
            print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['tolerance']}")
    return 0 if doc.get("passed") else 1


COMMANDS = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "estimate": cmd_estimate,
    "adaptive": cmd_adaptive,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def _u64(s: str) -> int:
    v = int(s, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptive-kb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "report", help="TOML run configuration")
        p.add_argument("--seed", type=_u64, help="master seed override")
        p.add_argument("--out", help="output directory (default: output.directory)")
        p.add_argument("--workers", type=int, help="worker processes for experiments")
        p.add_argument("--format", choices=("csv", "json"), help="trace file format")
        if name == "simulate":
            p.add_argument("--replicate", type=int, default=0, help="replicate index to write")
        if name in ("filter", "estimate", "adaptive"):
            p.add_argument("--paths", help="paths CSV (default: <out>/paths.csv)")
        if name == "report":
            p.add_argument("--report", help="report JSON (default: <out>/report.json)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else None
        if args.command == "simulate" and args.replicate < 0:
            raise ConfigError("replicate index must be non-negative")
        if args.workers is not None and args.workers < 1:
            raise ConfigError("workers must be at least 1")
        return COMMANDS[args.command](cfg, args)
    except (ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
