"""Batch front-end: ``elastic-bcm <subcommand> CONFIG [options]``.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error.
Artifacts go to ``--output-dir``, else ``$ELASTIC_BCM_OUTPUT``, else
``run.output_dir`` from the config.  Every CSV gets a ``.json`` sidecar with
the config digest.  Timestamps only appear in ``run.log``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import scipy.linalg

from . import __version__
from .boundary_ops import assemble_dtn_pair, blagoveshchenskii_oracle, connecting_operator, k_form, k_identity_oracle, make_basis
from .cgo import UnsupportedCaseError, certify_condition, discrete_lift, elastostatic_residual, make_probe
from .config import ConfigParseError, ExperimentConfig, load_config
from .elastic_forward import ElasticOperator, choose_dt, energy, solve_homogeneous
from .mesh_materials import ConfigurationError, StructuralError, Grid, preset_field, save_field_csv, validate_material
from .observability_carleman import (
    ThresholdError,
    carleman_decomposition,
    check_rho_condition,
    constants,
    empirical_observability,
    gamma_faces,
    manufactured_field,
    random_initial_data,
)
from .reconstruction import (
    fourier_sample,
    max_representable_xi,
    oracle_fourier,
    pseudo_inverse,
    reconstruct_density,
    xi_lattice,
)
from .stability_harness import (
    PerturbationExperiment,
    lipschitz_experiment,
    log_stability_experiment,
    loglog_slope,
    run_experiment,
)

log = logging.getLogger("elastic_bcm")

OUTPUT_ENV = "ELASTIC_BCM_OUTPUT"
SUBCOMMANDS = ("forward", "dtn", "probe", "reconstruct", "observability", "carleman-check", "stability", "verify")


class CheckFailure(RuntimeError):
    """A verification or acceptance check did not pass."""


# artifact writing


def _clean(v):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


class Artifacts:
    def __init__(self, out: Path, cfg: ExperimentConfig, command: str):
        self.out = out
        self.cfg = cfg
        self.command = command
        out.mkdir(parents=True, exist_ok=True)

    def json(self, name: str, payload: dict) -> Path:
        path = self.out / name
        path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")
        return path

    def csv(self, name: str, header: list[str], rows) -> Path:
        path = self.out / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        self.json(name + ".json", {"config_digest": self.cfg.digest, "command": self.command, "columns": header})
        return path

    def field(self, name: str, values: np.ndarray, grid: Grid) -> Path:
        path = self.out / name
        save_field_csv(path, values, grid)
        self.json(name + ".json", {"config_digest": self.cfg.digest, "command": self.command,
                                   "columns": [f"x{i + 1}" for i in range(grid.d)] + ["value"]})
        return path


def _output_dir(args, cfg: ExperimentConfig) -> Path:
    if args.output_dir:
        return Path(args.output_dir)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return Path(cfg.get("run.output_dir"))


def _setup_log(out: Path, verbose: bool) -> list[logging.Handler]:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger("elastic_bcm")
    root.setLevel(logging.INFO)
    handlers: list[logging.Handler] = [handler]
    if verbose:
        stream = logging.StreamHandler(sys.stderr)
        stream.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        handlers.append(stream)
    for h in handlers:
        root.addHandler(h)
    return handlers


# shared pipeline pieces


def _basis(cfg: ExperimentConfig, grid: Grid, material):
    return make_basis(grid, material, cfg.get_float("time.T"), cfg.get_int("basis.atoms"),
                      cfg.get_float("basis.width"), cfg.get_float("time.cfl"))


def _probes(cfg: ExperimentConfig, grid: Grid, material, xis, op=None):
    lift = cfg.get("probe.lift")
    if lift not in ("discrete", "analytic"):
        raise ConfigParseError("probe.lift", f"expected 'discrete' or 'analytic', got {lift!r}")
    probes = [make_probe(x, grid, material) for x in xis]
    if lift == "discrete":
        op = op or ElasticOperator(grid, material)
        probes = [discrete_lift(p, op) for p in probes]
    return probes


def _regularization(cfg: ExperimentConfig) -> tuple[str, float]:
    method = cfg.get("regularization.method")
    if method not in ("truncate", "tikhonov"):
        raise ConfigParseError("regularization.method", f"expected 'truncate' or 'tikhonov', got {method!r}")
    return method, cfg.get_float("regularization.param")


def _checked_material(cfg: ExperimentConfig, grid: Grid | None = None):
    m = cfg.material(grid)
    report = validate_material(m)
    if not report.ok:
        raise ConfigurationError(f"material: {report.violations[0]}")
    return m


def _obs_constants(cfg: ExperimentConfig, m, grid: Grid):
    return constants(m.bounds, grid, cfg.get_float("observability.c0"), cfg.get_float("observability.c1"),
                     cfg.get_float("observability.rho2"), tau=cfg.get_float("observability.tau"))


# subcommands


def cmd_forward(cfg: ExperimentConfig, art: Artifacts, args) -> int:
    """Homogeneous-Dirichlet evolution from seeded random data; energy history."""
    grid = cfg.grid()
    m = _checked_material(cfg)
    T = cfg.get_float("time.T")
    op = ElasticOperator(grid, m)
    dt, steps = choose_dt(op, T, cfg.get_float("time.cfl"))
    rng = np.random.default_rng(cfg.get_int("run.seed"))
    u0 = random_initial_data(grid, rng)
    u1 = random_initial_data(grid, rng)
    traj = solve_homogeneous(m, grid, u0, u1, T, dt, storage="all", cfl=cfg.get_float("time.cfl"), op=op)
    es = energy(traj, m, grid, op)
    art.csv("energy.csv", ["t", "energy"], zip(es.times, es.values))
    for c in range(grid.d):
        art.field(f"final_u{c + 1}.csv", traj.final[c], grid)
    art.json("forward.json", {"dt": dt, "steps": steps, "max_relative_drift": es.max_relative_drift})
    return 0


def cmd_dtn(cfg: ExperimentConfig, art: Artifacts, args) -> int:
    grid = cfg.grid()
    m = _checked_material(cfg)
    basis = _basis(cfg, grid, m)
    lam_T, lam_2T = assemble_dtn_pair(m, grid, basis)
    J = connecting_operator(lam_T, lam_2T)
    ev = scipy.linalg.eigh(J.meta["form"], basis.gram, eigvals_only=True)
    art.json("dtn.json", {
        "basis": basis.describe(),
        "size": basis.size,
        "asymmetry": J.meta["asymmetry"],
        "eig_min": float(ev.min()),
        "eig_max": float(ev.max()),
    })
    art.csv("j_spectrum.csv", ["index", "eigenvalue"], enumerate(ev[::-1].tolist()))
    if args.dump_operator:
        base = Path(args.dump_operator)
        lam_T.dump(base.with_name(base.name + ".lambda_T"))
        lam_2T.dump(base.with_name(base.name + ".lambda_2T"))
        J.dump(base.with_name(base.name + ".J"))
    return 0


def cmd_probe(cfg: ExperimentConfig, art: Artifacts, args) -> int:
    grid = cfg.grid()
    m = _checked_material(cfg)
    xis = xi_lattice(grid, cfg.get_float("probe.gamma"))
    rows = []
    probes = []
    for xi in xis:
        p = make_probe(xi, grid, m)
        rows.append(list(xi) + [certify_condition(p, m, grid), elastostatic_residual(p, m, grid)])
        probes.append(p.to_json())
    header = [f"xi_{i + 1}" for i in range(grid.d)] + ["condition_residual", "elastostatic_residual"]
    art.csv("probes.csv", header, rows)
    art.json("probes.json", {"probes": probes})
    return 0


def cmd_reconstruct(cfg: ExperimentConfig, art: Artifacts, args) -> int:
    grid = cfg.grid()
    m = _checked_material(cfg)
    gamma = cfg.get_float("probe.gamma")
    top = max_representable_xi(grid)
    if gamma > top:
        raise ConfigurationError(f"probe.gamma={gamma} exceeds the max representable |xi| = {top:.6g} on this grid")
    basis = _basis(cfg, grid, m)
    op = ElasticOperator(grid, m)
    lam_T, lam_2T = assemble_dtn_pair(m, grid, basis, op)
    J = connecting_operator(lam_T, lam_2T)
    method, param = _regularization(cfg)
    Jinv = pseudo_inverse(J, method, param)
    xis = xi_lattice(grid, gamma)
    samples = []
    rows = []
    for p in _probes(cfg, grid, m, xis, op):
        kp = k_form(lam_T, p.trace0_phi, p.trace1_phi)
        ks = k_form(lam_T, p.trace0_psi, p.trace1_psi)
        F = fourier_sample(Jinv, kp, ks, p.iota)
        o = oracle_fourier(m.rho, p.xi, grid)
        samples.append((p.xi, F))
        rows.append(list(p.xi) + [F.real, F.imag, o.real, o.imag])
    res = reconstruct_density(samples, gamma, grid, truth=m.rho)
    header = [f"xi_{i + 1}" for i in range(grid.d)] + ["re", "im", "oracle_re", "oracle_im"]
    art.csv("samples.csv", header, rows)
    art.field("rho_reconstructed.csv", res.rho_rec, grid)
    metrics = dict(res.metrics)
    metrics.update({"rank": Jinv.rank, "size": basis.size, "asymmetry": J.meta["asymmetry"],
                    "method": method, "param": param})
    art.json("metrics.json", metrics)
    return 0


def cmd_observability(cfg: ExperimentConfig, art: Artifacts, args) -> int:
    grid = cfg.grid()
    m = _checked_material(cfg)
    cc = _obs_constants(cfg, m, grid)
    rc = check_rho_condition(m, cc, grid)
    T = cfg.get_float("observability.T")
    stats = empirical_observability(m, grid, cc, T, cfg.get_int("observability.ensemble"),
                                    cfg.get_int("run.seed"), cfl=cfg.get_float("time.cfl"))
    payload = json.loads(cc.to_json())
    payload.update({
        "gamma_faces": gamma_faces(grid),
        "rho_condition_min": rc.min_value,
        "rho_condition_ok": rc.ok,
        "T": T,
        "T_exceeds_Tmin": T > cc.Tmin,
        "max_ratio": stats.max_ratio,
        "median_ratio": stats.median_ratio,
        "stabilization": stats.stabilization,
        "unobservable": stats.unobservable,
    })
    art.json("observability.json", payload)
    art.csv("ratios.csv", ["sample", "ratio"], enumerate(stats.ratios.tolist()))
    return 0


def _carleman_defects(cfg: ExperimentConfig, ns=(32, 64, 128)) -> dict:
    out = {"n": list(ns), "defect": [], "sos_holds": []}
    for n in ns:
        g = cfg.grid(n)
        m = cfg.material(g)
        cc = _obs_constants(cfg, m, g)
        w, wtt = manufactured_field(g)
        dec = carleman_decomposition(w, wtt, m, cc, g)
        out["defect"].append(dec.defect)
        out["sos_holds"].append(dec.sos_holds)
    h = [1.0 / (n - 1) for n in ns]
    out["order"] = loglog_slope(h, out["defect"])
    return out


def cmd_carleman_check(cfg: ExperimentConfig, art: Artifacts, args) -> int:
    grid = cfg.grid()
    m = _checked_material(cfg)
    cc = _obs_constants(cfg, m, grid)
    payload = json.loads(cc.to_json())
    payload["gamma_faces"] = gamma_faces(grid)
    rc = check_rho_condition(m, cc, grid)
    payload["rho_condition_min"] = rc.min_value
    payload["rho_condition_ok"] = rc.ok
    payload["decomposition"] = _carleman_defects(cfg)
    art.json("carleman.json", payload)
    mask = cc.gamma_mask
    pts = grid.boundary_coords()
    art.csv("gamma_nodes.csv", [f"x{i + 1}" for i in range(grid.d)] + ["in_gamma"],
            [list(p) + [int(f)] for p, f in zip(pts, mask)])
    return 0


def cmd_stability(cfg: ExperimentConfig, art: Artifacts, args) -> int:
    grid = cfg.grid()
    m = _checked_material(cfg)
    name, *params = cfg.get("stability.delta").split()
    kw = {}
    for p in params:
        k, _, v = p.partition("=")
        kw[k] = float(v)
    # the preset's base value is dropped: δρ is the bump part only
    kw["base"] = 0.0
    delta = preset_field(name, grid, **kw)
    basis = _basis(cfg, grid, m)
    op = ElasticOperator(grid, m)
    xis = xi_lattice(grid, cfg.get_float("probe.gamma"))
    probes = _probes(cfg, grid, m, xis, op)
    method, param = _regularization(cfg)
    exp = PerturbationExperiment(grid, m, delta, cfg.get_floats("stability.epsilons"), basis, probes, method, param)
    run_experiment(exp)
    lip = lipschitz_experiment(exp, cfg.get_vectors("stability.xi"))
    logst = log_stability_experiment(exp)
    art.csv("stability.csv", ["epsilon", "E", "L2diff", "gamma", "bound_term"],
            [[r["epsilon"], r["E"], r["L2diff"], r["gamma"], r["bound_term"]] for r in logst["rows"]])
    slopes = {k: {"slope": v["slope"], "slope_oracle": v["slope_oracle"]} for k, v in lip["xi"].items()}
    art.json("stability.json", {
        "R": exp.R,
        "threshold": logst["threshold"],
        "E_slope_vs_eps": lip["E_slope_vs_eps"],
        "slopes": slopes,
        "co_decrease": logst["co_decrease"],
        "out_of_regime": [r["out_of_regime"] for r in logst["rows"]],
    })
    return 0


# verify


def _check(results: list, name: str, value: float, ok: bool, limit: str) -> None:
    results.append({"check": name, "value": value, "limit": limit, "pass": bool(ok)})


def cmd_verify(cfg: ExperimentConfig, art: Artifacts, args) -> int:
    """Oracle suite on coarse copies of the configured problem."""
    n = args.check_n
    results: list[dict] = []
    rng = np.random.default_rng(cfg.get_int("run.seed"))

    g = cfg.grid(n)
    m = _checked_material(cfg, g)
    T = cfg.get_float("time.T")
    basis = make_basis(g, m, T, max(2, min(cfg.get_int("basis.atoms"), 4)), cfg.get_float("basis.width"),
                       cfg.get_float("time.cfl"))
    op = ElasticOperator(g, m)
    lam_T, lam_2T = assemble_dtn_pair(m, g, basis, op)
    J = connecting_operator(lam_T, lam_2T)
    worst = 0.0
    for _ in range(2):
        cf = rng.standard_normal(basis.size)
        ch = rng.standard_normal(basis.size)
        ref = blagoveshchenskii_oracle(m, g, basis, cf, ch, op)
        worst = max(worst, abs(cf @ J.meta["form"] @ ch - ref) / abs(ref))
    _check(results, "blagoveshchenskii_identity", worst, worst <= 0.05, "<= 0.05 relative")

    if m.is_constant_mu():
        worst = 0.0
        for xi in (np.zeros(g.d), np.eye(g.d)[0] * 2 * np.pi):
            p = discrete_lift(make_probe(xi, g, m), op)
            kf = k_form(lam_T, p.trace0_phi, p.trace1_phi)
            cf = rng.standard_normal(basis.size)
            ref = k_identity_oracle(m, g, basis, cf, p.phi, op)
            worst = max(worst, abs(cf @ kf - ref) / abs(ref))
        _check(results, "k_identity", worst, worst <= 0.05, "<= 0.05 relative")

        xi = np.eye(g.d)[0] * 2 * np.pi
        cond = certify_condition(make_probe(xi, g, m), m, g)
        _check(results, "cgo_condition_residual", cond, cond <= 1e-12, "<= 1e-12")
        ns = (32, 64)
        res = []
        for k in ns:
            gk = cfg.grid(k)
            mk = cfg.material(gk)
            res.append(elastostatic_residual(make_probe(xi, gk, mk), mk, gk))
        order = loglog_slope([1 / (k - 1) for k in ns], res)
        _check(results, "cgo_elastostatic_order", order, 1.7 <= order <= 2.3, "in [1.7, 2.3]")
    else:
        results.append({"check": "k_identity", "value": None, "limit": "constant mu only", "pass": True,
                        "skipped": True})

    car = _carleman_defects(cfg, (64, 128))
    _check(results, "carleman_defect_order", car["order"], car["order"] >= 1.7 and all(car["sos_holds"]),
           ">= 1.7 and sum of squares holds")

    # the centred-velocity energy oscillates at O(dt²); 64 nodes at CFL 0.25 keep it under 1e-3
    g2 = cfg.grid(64)
    m2 = cfg.material(g2)
    op2 = ElasticOperator(g2, m2)
    dt, _ = choose_dt(op2, T, min(cfg.get_float("time.cfl"), 0.25))
    u0 = random_initial_data(g2, rng)
    u1 = random_initial_data(g2, rng)
    drift = energy(solve_homogeneous(m2, g2, u0, u1, T, dt, op=op2), m2, g2, op2).max_relative_drift
    _check(results, "energy_drift", drift, drift <= 1e-3, "<= 1e-3 relative")

    ok = all(r["pass"] for r in results)
    art.json("verify.json", {"checks": results, "all_pass": ok, "check_n": n})
    for r in results:
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['check']}: {r['value']} ({r['limit']})")
    return 0 if ok else 1


COMMANDS = {
    "forward": cmd_forward,
    "dtn": cmd_dtn,
    "probe": cmd_probe,
    "reconstruct": cmd_reconstruct,
    "observability": cmd_observability,
    "carleman-check": cmd_carleman_check,
    "stability": cmd_stability,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="elastic-bcm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("config", help="INI experiment configuration")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override a configuration entry (repeatable)")
    ap.add_argument("--output-dir", help=f"artifact directory (overrides ${OUTPUT_ENV} and run.output_dir)")
    ap.add_argument("--dump-operator", metavar="PATH", help="dtn: write the operators as header + binary matrix")
    ap.add_argument("--check-n", type=int, default=16, help="verify: grid size of the coarse oracle checks")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return ap


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        for item in args.overrides:
            key, sep, val = item.partition("=")
            if not sep:
                raise ConfigParseError(key, "override must be SECTION.KEY=VALUE")
            overrides[key.strip()] = val.strip()
        if not Path(args.config).is_file():
            raise ConfigurationError(f"config file {args.config} not found")
        cfg = load_config(args.config, overrides)
        out = _output_dir(args, cfg)
        handlers = _setup_log(out, args.verbose)
    except (ConfigurationError, StructuralError) as exc:
        print(f"elastic-bcm: error: {exc}", file=sys.stderr)
        return 2
    art = Artifacts(out, cfg, args.subcommand)
    log.info("%s %s digest=%s", args.subcommand, args.config, cfg.digest)
    t0 = time.perf_counter()
    try:
        return COMMANDS[args.subcommand](cfg, art, args)
    except (ConfigurationError, StructuralError, UnsupportedCaseError, ThresholdError) as exc:
        print(f"elastic-bcm {args.subcommand}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (CheckFailure, RuntimeError, ValueError) as exc:
        print(f"elastic-bcm {args.subcommand}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        log.info("%s finished in %.1fs", args.subcommand, time.perf_counter() - t0)
        for h in handlers:
            logging.getLogger("elastic_bcm").removeHandler(h)
            h.close()


def main() -> None:
    sys.exit(run())
