"""Command-line scenario runner.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 acceptance-check failure (``--check``).
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from . import config as C
from .errors import ConfigError, DivergenceError, WflowError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4

# acceptance criteria evaluated by ``--check`` for each scenario
CHECKS_FOR = {
    "simulate": ["2", "3", "4"],
    "covariance": ["1"],
    "invert": ["5", "6", "10"],
    "regularize": ["7"],
    "picard": ["8"],
    "peano": ["9"],
    "arratia": ["A"],
}


class Writer:
    """Serialises all CSV output of one run; every file starts with a provenance comment."""

    def __init__(self, outdir, cfg: C.RunConfig):
        self.outdir = outdir
        self.prov = f"wflow {__version__} config_sha256={cfg.digest()} seed={cfg['run']['seed']}"
        os.makedirs(outdir, exist_ok=True)

    def write(self, name, header, rows):
        path = os.path.join(self.outdir, name)
        with open(path, "w", newline="") as fh:
            fh.write(f"# {self.prov}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(v) for v in r])
        return path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


# -- scenarios -----------------------------------------------------------------


def cmd_simulate(cfg: C.RunConfig, out: Writer) -> int:
    from .dynamics import simulate_ensemble

    decay = C.decay_from(cfg)
    sim = C.sim_from(cfg, decay)
    init = C.initial_from(cfg)
    drift = C.drift_from(cfg, decay)
    stride = cfg["run"]["stride"]
    try:
        res = simulate_ensemble(sim, init, drift, record_stride=stride)
    except ArithmeticError as e:
        out.write("diagnostic.csv", ["error_type", "message"], [[type(e).__name__, str(e)]])
        raise
    u = init.u
    rows = []
    for p, path in zip(res.path_indices, res.records):
        for t, y in zip(res.times, path):
            rows.extend((p, t, ui, yi) for ui, yi in zip(u, y))
    out.write("trajectory.csv", ["path_id", "t", "u", "y"], rows)
    out.write("summary.csv", ["path_id", "exit_time", "final_spread", "qv_mean", "qv_expected_mean", "max_violation"],
              [(p, et, y[-1] - y[0], q.mean(), qe.mean(), mv) for p, et, y, q, qe, mv in
               zip(res.path_indices, res.exit_times, res.final, res.qv, res.qv_expected, res.max_violation)])
    return EXIT_OK


def cmd_covariance(cfg: C.RunConfig, out: Writer) -> int:
    from .noise import StreamBatch, increment_covariance, martingale_sum, sheet_from_normals
    from .state import mass_function

    decay = C.decay_from(cfg)
    kern = C.kernel_from(cfg)
    s = cfg["sim"]
    y = C.initial_from(cfg).values
    m = mass_function(y, kern)
    P = cfg["run"]["paths"]
    z = StreamBatch(cfg["run"]["seed"], range(P), tag="covariance").normals(2 * decay.size)[:, 0]
    inc = sheet_from_normals(z, decay, s["dt"])
    dY = martingale_sum(np.tile(y, (P, 1)), decay, inc.dW_re, inc.dW_im) / np.sqrt(m)
    emp = dY.T @ dY / P
    ana = increment_covariance(y, m, decay, s["dt"])
    n = y.size
    out.write("covariance.csv", ["i", "j", "delta", "empirical", "analytic"],
              [(i, j, y[i] - y[j], emp[i, j], ana[i, j]) for i in range(n) for j in range(n)])
    return EXIT_OK


def cmd_invert(cfg: C.RunConfig, out: Writer) -> int:
    from .checks import raised_cosine
    from .girsanov import invert_constant_mass, invert_general, uniform_x_grid
    from .kernels import SpectralDecay

    decay = C.decay_from(cfg)
    iv = cfg["invert"]
    rows, last = [], None
    for lvl in range(iv["levels"]):
        # each level doubles the band and halves the spacing
        d = SpectralDecay(decay.alpha, decay.k_max * 2**lvl, decay.dk / 2**lvl, decay.scale)
        if iv["mode"] == "constant":
            w = iv["width"]
            x = uniform_x_grid(-w - 0.5, w + 0.5, d.k_max)
            last = invert_constant_mass(raised_cosine(x, w), x, d, support=(-w, w))
        else:
            last = invert_general(C.drift_from(cfg, d), C.initial_from(cfg), C.kernel_from(cfg), None, d)
        rows.append((lvl, d.k_max, d.dk, last.residual_sup, last.l2_norm_sq))
    out.write("residuals.csv", ["level", "k_max", "dk", "residual_sup", "l2_norm_sq"], rows)
    out.write("inversion.csv", ["k", "h_re", "h_im"], zip(last.k, last.h_re, last.h_im))
    return EXIT_OK


def cmd_regularize(cfg: C.RunConfig, out: Writer) -> int:
    from .checks import loglog_slope, regularization_tables

    r = cfg["regularize"]
    if not 0 < r["delta"] <= 1:
        raise ConfigError("regularize.delta must lie in (0, 1]")
    eps = 2.0 ** -np.arange(r["eps_max_pow"], r["eps_min_pow"] + 1)
    eps, gap, lip = regularization_tables(r["delta"], eps, np.linspace(0.2, 0.8, r["s_points"]))
    out.write("regularize.csv", ["eps", "gap", "lipschitz"], zip(eps, gap, lip))
    d = r["delta"]
    out.write("exponents.csv", ["quantity", "fitted", "predicted"],
              [("gap", loglog_slope(eps, np.maximum(gap, 1e-300)), d / (2 - d)),
               ("lipschitz", loglog_slope(eps, lip), (d - 1) / (2 - d))])
    return EXIT_OK


def cmd_picard(cfg: C.RunConfig, out: Writer) -> int:
    from .drift import DriftSpec
    from .dynamics import SimConfig
    from .meanfield import MeasureFlow, picard_iterate
    from .noise import NoiseStream
    from .state import HistogramMeasure

    pc, h, s, seed = cfg["picard"], cfg["histogram"], cfg["sim"], cfg["run"]["seed"]
    decay = C.decay_from(cfg)
    sim = SimConfig(T=s["T"], dt=s["dt"], n=2, decay=decay, seed=seed)
    edges = np.linspace(h["x_min"], h["x_max"], h["bins"] + 1)
    a_sup, xs = pc["a_sup"], pc["xi_scale"]
    drift = DriftSpec("b1", a=lambda x, y: a_sup * np.tanh(3 * (y - x)), derivative_sups=(a_sup,))
    c = 0.5 * (edges[1:] + edges[:-1])
    p0 = np.exp(-0.5 * (c / xs) ** 2)
    nu0 = MeasureFlow.constant(HistogramMeasure(edges, p0 / p0.sum()), sim.times())
    common = NoiseStream(seed, 0, tag="common")
    try:
        fp, diag = picard_iterate(nu0, common, drift, sim, pc["J"], pc["tol"], pc["max_iter"],
                                  xi_sampler=lambda z: xs * z)
        gaps, ent = diag.gaps, diag.entropy_max
    except DivergenceError as e:
        out.write("diagnostics.csv", ["iteration", "sup_tv_gap"], enumerate(e.gaps, 1))
        raise
    out.write("diagnostics.csv", ["iteration", "sup_tv_gap", "entropy_max"], zip(range(1, len(gaps) + 1), gaps, ent))
    stride = cfg["run"]["stride"]
    rows = [(t, a, b, p) for i, t in enumerate(fp.times) if i % stride == 0 or i == len(fp.times) - 1
            for a, b, p in zip(edges[:-1], edges[1:], fp.probs[i])]
    out.write("fixed_point.csv", ["t", "edge_left", "edge_right", "prob"], rows)
    return EXIT_OK


def cmd_peano(cfg: C.RunConfig, out: Writer) -> int:
    from .checks import peano_runs

    s, h, k = cfg["sim"], cfg["histogram"], cfg["kernel"]
    edges = np.linspace(h["x_min"], h["x_max"], h["bins"] + 1)
    r = peano_runs(cfg["run"]["seed"], cfg["run"]["paths"], s["n"], s["T"], s["dt"], cfg["peano"]["eps"],
                   k["alpha"], k["f_scale"], edges)
    out.write("deterministic.csv", ["t", "mean_plus", "mean_minus"], zip(r["times"], r[("det", 1)], r[("det", -1)]))
    out.write("noisy.csv", ["edge_left", "edge_right", "prob_plus", "prob_minus"],
              zip(edges[:-1], edges[1:], r[("noisy", 1)], r[("noisy", -1)]))
    tv = float(np.abs(r[("noisy", 1)] - r[("noisy", -1)]).sum())
    sep = float(abs(r[("det", 1)][-1] - r[("det", -1)][-1]))
    out.write("summary.csv", ["quantity", "value"], [("deterministic_separation", sep), ("noisy_tv", tv)])
    return EXIT_OK


def cmd_arratia(cfg: C.RunConfig, out: Writer) -> int:
    from .arratia import covariation_profile, empirical_covariation, simulate_arratia
    from .kernels import fourier_f_squared

    s = cfg["sim"]
    y0 = C.initial_from(cfg).values
    tr = simulate_arratia(y0, s["T"], s["dt"], cfg["run"]["paths"], cfg["run"]["seed"])
    rows = []
    stride = cfg["run"]["stride"]
    for i, t in enumerate(tr.times):
        if i % stride and i != len(tr.times) - 1:
            continue
        pos, mas = tr.positions[0, i], tr.masses[0, i]
        seen = []
        for j in range(y0.size):
            if j == 0 or pos[j] != pos[j - 1] or mas[j] != mas[j - 1]:
                seen.append((t, len(seen), pos[j], mas[j]))
        rows.extend(seen)
    out.write("clusters.csv", ["t", "cluster_id", "position", "mass"], rows)
    decay = C.decay_from(cfg)
    k0 = fourier_f_squared(decay, 0.0)
    cov = []
    n = y0.size
    for u in range(n):
        for v in range(u, n):
            cov.append((u, v, y0[v] - y0[u], covariation_profile(tr, u, v).mean(),
                        empirical_covariation(tr, u, v).mean(),
                        s["T"] * fourier_f_squared(decay, y0[v] - y0[u]) / k0))
    out.write("covariation.csv", ["u", "u_prime", "delta", "arratia_profile", "arratia_empirical",
                                  "spectral_kernel_normalised"], cov)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "covariance": cmd_covariance,
    "invert": cmd_invert,
    "regularize": cmd_regularize,
    "picard": cmd_picard,
    "peano": cmd_peano,
    "arratia": cmd_arratia,
}


def run_checks(keys, stream=sys.stdout) -> bool:
    from .checks import ALL_CHECKS, check_arratia

    ok = True
    for k in keys:
        res = (check_arratia if k == "A" else ALL_CHECKS[k])()
        print(res.line(), file=stream, flush=True)
        ok &= res.passed
    return ok


def build_parser():
    p = argparse.ArgumentParser(prog="wflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"wflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["run"]:
        sp = sub.add_parser(name, help="scenario from the config file" if name == "run" else f"{name} scenario")
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--paths", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out")
        sp.add_argument("--stride", type=int, help="record every stride-th time step")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--check", action="store_true", help="also evaluate the matching acceptance criteria")
        sp.add_argument("--dump-config", action="store_true", help="write the resolved config and exit")
    ck = sub.add_parser("check", help="evaluate acceptance criteria")
    ck.add_argument("--only", default="", help="comma-separated criterion keys (default: all)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "check":
        from .checks import ALL_CHECKS

        known = list(ALL_CHECKS) + ["A"]
        keys = [k.strip() for k in args.only.split(",") if k.strip()] or known
        bad = [k for k in keys if k not in known]
        if bad:
            print(f"wflow: config error: unknown criteria {', '.join(bad)}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK if run_checks(keys) else EXIT_CHECK
    try:
        flags = C.parse_set(args.set)
        run = flags.setdefault("run", {})
        for key in ("seed", "paths", "threads", "out", "stride"):
            if getattr(args, key) is not None:
                run[key] = str(getattr(args, key))
        scenario = None if args.command == "run" else args.command
        cfg = C.load(args.config, scenario, overrides=flags)
        if args.dump_config:
            sys.stdout.write(cfg.to_ini())
            return EXIT_OK
        out = Writer(cfg["run"]["out"], cfg)
        code = COMMANDS[cfg.scenario](cfg, out)
    except ConfigError as e:
        print(f"wflow: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, DivergenceError) as e:
        print(f"wflow: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except WflowError as e:
        print(f"wflow: error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.check and not run_checks(CHECKS_FOR[cfg.scenario]):
        return EXIT_CHECK
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
