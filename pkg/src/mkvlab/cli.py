"""Command line entry: one subcommand per experiment, JSON and CSV artifacts, an append-only results ledger."""
from __future__ import annotations

import argparse
import csv
import fcntl
import io
import itertools
import json
import math
import multiprocessing
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .control_value import ConstantPolicy, estimate_nplayer_value, estimate_value
from .dynamics import check_flow_property, initial_cloud, simulate_mkv
from .errors import ConfigurationError, PreconditionError
from .measures import EmpiricalMeasure, w2_sorted_1d, wasserstein2
from .noise_paths import sample_worlds, stream_rng
from .verification import (
    CylindricalTestFunction,
    compactness_probe,
    dpp_enumeration_bound,
    dpp_residual,
    hamiltonian,
    ito_wentzell_scaling,
    law_invariance_gap,
    sample_PL,
    sandwich_check,
    sine_basis,
    identity_outer,
    square_outer,
)

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
LEDGER_FIELDS = ["timestamp", "subcommand", "config_hash", "statistic", "value", "stderr", "pass"]
SUBCOMMANDS = ("simulate", "value", "nplayer-value", "dpp", "law-invariance", "hamiltonian", "ito-wentzell",
               "sandwich", "compactset", "wasserstein")


def _num(x):
    """Float, or None for nan/inf so that artifacts stay valid JSON."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


@dataclass
class Outcome:
    checks: list = field(default_factory=list)  # {check, statistic, threshold, pass, stderr}
    statistics: list = field(default_factory=list)  # (name, value, stderr)
    partial: bool = False

    def stat(self, name, value, stderr=None):
        self.statistics.append((name, _num(value), _num(stderr)))

    def check(self, name, statistic, threshold, passed, stderr=None):
        self.checks.append({"check": name, "statistic": _num(statistic), "threshold": _num(threshold),
                            "pass": bool(passed), "stderr": _num(stderr)})

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.checks)


# --- worker pool ----------------------------------------------------------------------

_POOL_STATE = None


def _pool_task(i):
    fn, items = _POOL_STATE
    return fn(items[i])


def pool_map(jobs: int):
    """map() over a fork pool; work items stay in the parent and only indices are sent."""

    def run(fn, items):
        global _POOL_STATE
        items = list(items)
        if jobs <= 1 or len(items) < 2:
            return list(map(fn, items))
        _POOL_STATE = (fn, items)
        try:
            with multiprocessing.get_context("fork").Pool(min(jobs, len(items))) as pool:
                return pool.map(_pool_task, range(len(items)))
        finally:
            _POOL_STATE = None

    return run


# --- subcommands ----------------------------------------------------------------------

def _finite(x) -> bool:
    return bool(np.isfinite(x))


def run_simulate(cfg: ExperimentConfig, jobs: int) -> Outcome:
    model, budget = cfg.build_model(), cfg.build_budget()
    grid = budget.grid(model)
    noise = sample_worlds(grid, budget.n_worlds, budget.n_particles, model.m, cfg.seed)
    if cfg.control.index >= model.control.size:
        raise ConfigurationError(f"control.index: must be below {model.control.size}")
    policy = ConstantPolicy(cfg.control.index)
    mu = cfg.initial_law()
    traj, _ = simulate_mkv(model, 0.0, mu, policy, noise)
    out = Outcome()
    final = traj.final
    out.stat("terminal_mean", final.mean())
    out.stat("terminal_second_moment", np.mean(np.sum(final ** 2, axis=-1)))
    gap = check_flow_property(model, 0.0, grid.times[grid.n_steps // 2], mu, policy, noise)
    out.check("flow_property_gap", gap, 0.0, gap == 0.0)
    return out


def _value_outcome(est, label: str) -> Outcome:
    out = Outcome(partial=bool(est.partial))
    out.stat(label, est.mean, est.stderr)
    out.stat("n_evals", est.n_evals)
    out.check(f"{label}_finite", est.mean, 0.0, _finite(est.mean), est.stderr)
    return out


def run_value(cfg: ExperimentConfig, jobs: int) -> Outcome:
    model, budget = cfg.build_model(), cfg.build_budget()
    est, _ = estimate_value(model, cfg.grid.t0, cfg.initial_law(), policy_class=cfg.control.policy_class,
                            budget=budget)
    return _value_outcome(est, "value")


def run_nplayer_value(cfg: ExperimentConfig, jobs: int) -> Outcome:
    model, p = cfg.build_model(), cfg.nplayer
    budget = cfg.build_budget(n_worlds=p.worlds, train_worlds=p.train_worlds)
    est, _ = estimate_nplayer_value(model, p.n, p.m, p.eps0, p.eps1, cfg.grid.t0, cfg.initial_law(), budget,
                                    cfg.control.policy_class)
    return _value_outcome(est, "nplayer_value")


def run_dpp(cfg: ExperimentConfig, jobs: int) -> Outcome:
    model, budget = cfg.build_model(), cfg.build_budget()
    mu, t0 = cfg.initial_law(), cfg.grid.t0
    res = dpp_residual(model, t0, mu, cfg.dpp.theta, cfg.control.policy_class, budget, cfg.dpp.n_nodes)
    out = Outcome(partial=bool(res.lhs.partial or res.rhs.partial))
    out.stat("lhs", res.lhs.mean, res.lhs.stderr)
    out.stat("rhs", res.rhs.mean, res.rhs.stderr)
    out.stat("residual", res.residual, res.stderr)
    bound = 0.0
    if cfg.dpp.enumerate:
        enum = dpp_enumeration_bound(model, t0, mu, cfg.dpp.theta, budget)
        bound = enum.bound
        out.stat("enumeration_bound", enum.bound, enum.stderr)
    threshold = bound + 3.0 * res.stderr
    out.check("dpp_residual", res.residual, threshold, res.residual <= threshold, res.stderr)
    return out


def run_law_invariance(cfg: ExperimentConfig, jobs: int) -> Outcome:
    model, budget = cfg.build_model(), cfg.build_budget()
    xi = cfg.initial_law()
    rng = stream_rng(cfg.seed, 0, 41)
    eta = EmpiricalMeasure(cfg.init.mean + cfg.init.std * rng.standard_normal((cfg.init.atoms, 1)))
    perm = EmpiricalMeasure(xi.points[rng.permutation(xi.n)])
    out = Outcome()
    res = law_invariance_gap(model, cfg.grid.t0, xi, eta, budget, cfg.control.policy_class)
    out.stat("gap_resampled", res.gap, res.stderr)
    out.stat("w2_resampled", res.w2)
    out.stat("lipschitz_fit", res.lipschitz_sqrt)
    out.check("law_invariance_resampled", res.gap, res.threshold, res.gap <= res.threshold, res.stderr)
    res_p = law_invariance_gap(model, cfg.grid.t0, xi, perm, budget, cfg.control.policy_class, fit_bias=False)
    out.check("law_invariance_permuted", res_p.gap, 0.0, res_p.gap == 0.0)
    out.partial = bool(res.v_xi.partial or res.v_eta.partial)
    return out


def run_hamiltonian(cfg: ExperimentConfig, jobs: int) -> Outcome:
    model = cfg.build_model()
    iw = cfg.ito_wentzell
    u = CylindricalTestFunction((sine_basis([iw.freq] * model.d, iw.phase),), identity_outer())
    atoms = np.repeat(cfg.initial_law().points, model.d, axis=1)
    H = hamiltonian(model, cfg.grid.t0, atoms, u)
    out = Outcome()
    out.stat("hamiltonian", H)
    out.check("hamiltonian_finite", H, 0.0, _finite(H))
    if model.control.low is not None:
        fine = model.control.refine(2 * round(model.control.size ** (1 / model.control.dim)) - 1)
        H_fine = hamiltonian(model, cfg.grid.t0, atoms, u, controls=fine)
        out.stat("hamiltonian_refined", H_fine)
        out.check("hamiltonian_refinement_monotone", H_fine - H, 0.0, H_fine <= H + 1e-12)
    return out


def run_ito_wentzell(cfg: ExperimentConfig, jobs: int) -> Outcome:
    model, iw = cfg.build_model(), cfg.ito_wentzell
    u = CylindricalTestFunction((sine_basis([iw.freq] * model.d, iw.phase),), square_outer())
    x0 = initial_cloud(cfg.initial_law(), iw.particles, iw.worlds, cfg.seed)
    x0 = np.repeat(x0[..., :1], model.d, axis=-1)
    policy = ConstantPolicy(cfg.control.index)
    rep = ito_wentzell_scaling(model, u, x0, policy, tuple(iw.n_steps), iw.worlds, cfg.seed)
    literal = ito_wentzell_scaling(model, u, x0, policy, tuple(iw.n_steps), iw.worlds, cfg.seed,
                                   realized_covariation=False, particle_terms=False)
    out = Outcome()
    for k, v in zip(rep.n_steps, rep.mean_abs):
        out.stat(f"mean_abs_residual[n_steps={k}]", v)
    for k, v in zip(literal.n_steps, literal.mean_abs):
        out.stat(f"mean_abs_residual_plain[n_steps={k}]", v)
    for j, r in enumerate(rep.ratios):
        ok = rep.exact or 1.5 <= r <= 3.0
        out.check(f"halving_ratio[{rep.n_steps[j]}->{rep.n_steps[j + 1]}]", r, 1.5, ok)
    return out


def run_sandwich(cfg: ExperimentConfig, jobs: int) -> Outcome:
    model, p, sw = cfg.build_model(), cfg.nplayer, cfg.sandwich
    budget = cfg.build_budget()
    nb = cfg.build_budget(n_worlds=p.worlds, train_worlds=p.train_worlds)
    m_list = [None if str(m).lower() == "none" else float(m) for m in sw.m_list]
    rep = sandwich_check(model, cfg.grid.t0, cfg.initial_law(), tuple(sw.n_list), tuple(m_list),
                         tuple(sw.eps_schedule), budget, nb, p.reg_samples, policy_class=cfg.control.policy_class,
                         map_fn=pool_map(jobs))
    out = Outcome(partial=bool(rep.v.partial))
    out.stat("v", rep.v.mean, rep.v.stderr)
    for r in rep.rows:
        tag = f"n={r.n},m={r.m},eps={r.eps}"
        out.stat(f"frak_v[{tag}]", r.frak_v.mean, r.frak_v.stderr)
        out.stat(f"Y0[{tag}]", r.Y0)
        out.stat(f"C_K[{tag}]", r.C_K)
        out.stat(f"width[{tag}]", r.width)
        out.check(f"sandwich[{tag}]", r.violation, 0.0, r.violation == 0.0, r.frak_v.stderr)
    for n in sw.n_list:
        for m in m_list:
            rows = [r for r in rep.rows if r.n == n and r.m == m]
            rows.sort(key=lambda r: -r.eps)
            widths = [r.width for r in rows]
            worst = max([b - a for a, b in zip(widths[:-1], widths[1:])], default=-1.0)
            out.check(f"width_decreasing[n={n},m={m}]", worst, 0.0, worst < 0.0)
    return out


def run_compactset(cfg: ExperimentConfig, jobs: int) -> Outcome:
    c = cfg.compactset
    sample = sample_PL(c.L, 0.0, cfg.initial_law(), c.tau, c.samples, cfg.seed, c.sigma0, c.worlds, c.particles)
    rep = compactness_probe(sample, tuple(c.eps_list))
    out = Outcome()
    out.stat("C_fit", sample.C_fit)
    for R, t in zip(sample.radii, sample.sup_tail):
        out.stat(f"sup_tail[R={R}]", t)
    for e, s in zip(rep.eps, rep.net_sizes):
        out.stat(f"net_size[eps={e}]", s)
    out.stat("sub_exponential", float(rep.sub_exponential))
    out.check("tails_decreasing", float(sample.tails_decreasing), 1.0, sample.tails_decreasing)
    worst = max(rep.defects.values())
    out.check("metric_axioms", worst, 1e-9, rep.axioms_hold(1e-9))
    return out


def run_wasserstein(cfg: ExperimentConfig, jobs: int) -> Outcome:
    ws = cfg.wasserstein
    rng = stream_rng(cfg.seed, 0, 43)
    worst_brute = 0.0
    for _ in range(ws.instances):
        n, d = int(rng.integers(1, ws.max_n + 1)), int(rng.integers(1, ws.max_d + 1))
        x, y = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        C = np.sum((x[:, None] - y[None]) ** 2, axis=-1)
        brute = min(np.mean(C[np.arange(n), list(p)]) for p in itertools.permutations(range(n)))
        worst_brute = max(worst_brute, abs(wasserstein2(EmpiricalMeasure(x), EmpiricalMeasure(y)) - math.sqrt(brute)))
    worst_sort = 0.0
    for n in sorted({2, 16, 64, ws.sort_n}):
        x, y = rng.standard_normal((n, 1)), rng.standard_normal((n, 1)) * 1.5 + 0.3
        mx, my = EmpiricalMeasure(x), EmpiricalMeasure(y)
        worst_sort = max(worst_sort, abs(wasserstein2(mx, my) - w2_sorted_1d(mx, my)))
    out = Outcome()
    out.check("exact_vs_bruteforce", worst_brute, 1e-10, worst_brute <= 1e-10)
    out.check("exact_vs_sorting", worst_sort, 1e-10, worst_sort <= 1e-10)
    return out


RUNNERS = {
    "simulate": run_simulate,
    "value": run_value,
    "nplayer-value": run_nplayer_value,
    "dpp": run_dpp,
    "law-invariance": run_law_invariance,
    "hamiltonian": run_hamiltonian,
    "ito-wentzell": run_ito_wentzell,
    "sandwich": run_sandwich,
    "compactset": run_compactset,
    "wasserstein": run_wasserstein,
}


# --- artifacts ------------------------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None else format(x, ".17g")


def artifact_json(sub: str, cfg: ExperimentConfig, out: Outcome) -> str:
    model = cfg.model.name
    checks = [{**c, "model": model, "params": cfg.model.params} for c in out.checks]
    doc = {
        "subcommand": sub,
        "config_hash": cfg.hash,
        "config": cfg.to_dict(),
        "checks": checks,
        "statistics": [{"statistic": s, "value": v, "stderr": e} for s, v, e in out.statistics],
        "partial": out.partial,
        "pass": out.passed,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def artifact_csv(sub: str, cfg: ExperimentConfig, out: Outcome) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["config_hash", "subcommand", "statistic", "value", "stderr", "pass"])
    for s, v, e in out.statistics:
        w.writerow([cfg.hash, sub, s, _fmt(v), _fmt(e), ""])
    for c in out.checks:
        w.writerow([cfg.hash, sub, c["check"], _fmt(c["statistic"]), _fmt(c["stderr"]), str(c["pass"]).lower()])
    return buf.getvalue()


def append_ledger(path: Path, sub: str, cfg_hash: str, out: Outcome, timestamp: str | None = None):
    """Appends one row per check under an exclusive lock."""
    timestamp = timestamp or time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a+", newline="") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.seek(0, 2)
            w = csv.writer(fh)
            if fh.tell() == 0:
                w.writerow(LEDGER_FIELDS)
            for c in out.checks:
                w.writerow([timestamp, sub, cfg_hash, c["check"], _fmt(c["statistic"]), _fmt(c["stderr"]),
                            str(c["pass"]).lower()])
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_ledger(path: Path) -> list:
    if not path.exists():
        raise ConfigurationError(f"ledger {path} does not exist")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(LEDGER_FIELDS) - set(rows[0]) if rows else set()
    if missing:
        raise ConfigurationError(f"ledger {path} lacks columns {sorted(missing)}")
    return rows


def summarise_ledger(rows: list, allow_mixed: bool = False) -> dict:
    """Latest row per (subcommand, config_hash, statistic); failures listed."""
    hashes = sorted({r["config_hash"] for r in rows})
    if len(hashes) > 1 and not allow_mixed:
        raise ConfigurationError(f"ledger mixes {len(hashes)} config hashes; pass --allow-mixed to aggregate")
    latest = {}
    for r in rows:
        latest[(r["subcommand"], r["config_hash"], r["statistic"])] = r
    failures = [{"subcommand": k[0], "config_hash": k[1], "check": k[2], "value": r["value"]}
                for k, r in latest.items() if r["pass"] != "true"]
    return {"config_hashes": hashes, "n_checks": len(latest), "n_failed": len(failures), "failures": failures,
            "pass": not failures}


# --- entry ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mkvlab", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML file, or JSON when the suffix is .json")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", default="results", help="artifact directory")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--format", choices=("json", "csv"), default="json", help="what to print on stdout")
    p = sub.add_parser("report")
    p.add_argument("--out", default="results", help="directory holding ledger.csv")
    p.add_argument("--ledger", help="explicit ledger path")
    p.add_argument("--allow-mixed", action="store_true", help="aggregate across config hashes")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--config", help="accepted for symmetry; unused")
    return parser


def _report(args) -> int:
    ledger = Path(args.ledger) if args.ledger else Path(args.out) / "ledger.csv"
    summary = summarise_ledger(read_ledger(ledger), args.allow_mixed)
    text = json.dumps(summary, sort_keys=True, indent=2) + "\n"
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "report.json").write_text(text)
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["subcommand", "config_hash", "check", "value"])
        for f in summary["failures"]:
            w.writerow([f["subcommand"], f["config_hash"], f["check"], f["value"]])
        text = buf.getvalue()
    sys.stdout.write(text)
    return EXIT_PASS if summary["pass"] else EXIT_FAIL


def run(subcommand: str, cfg: ExperimentConfig, out_dir, jobs: int = 1) -> tuple[int, Outcome]:
    """Runs one subcommand, writes ``<sub>.json`` / ``<sub>.csv`` and appends to ``ledger.csv``."""
    out = RUNNERS[subcommand](cfg, max(1, jobs))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = subcommand.replace("-", "_")
    (out_dir / f"{stem}.json").write_text(artifact_json(subcommand, cfg, out))
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        fh.write(artifact_csv(subcommand, cfg, out))
    append_ledger(out_dir / "ledger.csv", subcommand, cfg.hash, out)
    return (EXIT_PASS if out.passed else EXIT_FAIL), out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.subcommand == "report":
            return _report(args)
        cfg = load_config(args.config, args.seed)
        code, out = run(args.subcommand, cfg, args.out, args.jobs)
        stem = args.subcommand.replace("-", "_")
        sys.stdout.write((Path(args.out) / f"{stem}.{args.format}").read_text())
        if out.partial:
            sys.stderr.write("partial: search budget exhausted before convergence\n")
        return code
    except (ConfigurationError, PreconditionError) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        sys.stderr.write(f"runtime error: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
