"""Configuration-driven command line front end.

Each run validates its JSON config, resolves defaults, dispatches to one
problem, and writes ``manifest.json``, ``result.json`` and problem CSVs to
the output directory.  Exit status: 0 when every contract holds, 1 when some
contract fails (listed on stderr and in ``result.json``), 2 for invalid
configurations and other reported errors (``error.json``).
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import importlib.resources
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import jsonschema
import numpy as np

from . import __version__
from .dynamics import duality_report, forward_evolve
from .hum import HUMProblem, epsilon_sweep, sweep_csv, synthesize
from .inequalities import (
    decay_check,
    interpolation_check,
    observability_constant,
    po1_sweep,
    report_csv,
    spectral_report,
    spectral_witness,
)
from .io import write_json, write_text
from .linalg import ConvergenceError, NonObservableError
from .optimal import bang_bang_check, norm_optimal, scan_csv, time_optimal, uniqueness_probe
from .spectral import build_dirichlet_laplacian_1d, gram_matrix
from .tree import AdaptedField, build_tree

__all__ = ["main", "run", "verify_suite", "load_config", "resolve_config", "ConfigError", "TOLERANCES"]

COMMANDS = ("simulate", "hum", "norm-opt", "time-opt", "verify", "sweep")

TOLERANCES = {
    "duality": 1e-12,
    "energy": 1e-12,
    "steering": 1e-8,
    "slack": 1e-10,
    "chain": 1e-10,
    "terminal": 1e-10,
    "constraint": 1e-9,
    "norm": 1e-7,
    "proportionality": 1e-6,
    "maximality": 1e-12,
    "decay": 1e-12,
    "attainment": 1e-10,
}

DEFAULT_PARAMETERS = {
    "epsilon": 1e-2,
    "epsilons": [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
    "l": "auto",
    "convention": "adjoint",
    "class": "at-impulse",
    "trials": 100,
    "theta": 0.5,
}


class ConfigError(ValueError):
    """Invalid configuration; ``code`` is a machine-readable tag."""

    def __init__(self, message, code="config"):
        super().__init__(message)
        self.code = code


def _schema():
    text = importlib.resources.files("stochimpulse").joinpath("schema/config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", "config-read") from exc


def resolve_config(config, problem=None, convention=None, klass=None):
    """Validate against the schema and fill defaults; returns a new dict."""
    try:
        jsonschema.validate(config, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"schema violation at {where}: {exc.message}", "schema") from exc
    cfg = copy.deepcopy(config)
    cfg.setdefault("schema_version", 1)
    cfg["model"].setdefault("domain", "dirichlet-1d")
    cfg.setdefault("noise", {"F": 0.0})
    if problem is not None:
        cfg["problem"] = problem
    if "problem" not in cfg:
        raise ConfigError("no problem given in the config or on the command line", "schema")
    params = dict(DEFAULT_PARAMETERS)
    params.update(cfg.get("parameters", {}))
    if convention is not None:
        params["convention"] = convention
    if klass is not None:
        params["class"] = klass
    tol = dict(TOLERANCES)
    tol.update(params.get("tolerances", {}))
    params["tolerances"] = tol
    cfg["parameters"] = params
    cfg.setdefault("seed", 0)
    J = cfg["model"]["J"]
    if "y0" not in cfg:
        cfg["y0"] = [1.0 / j for j in range(1, J + 1)]
    if len(cfg["y0"]) != J:
        raise ConfigError(f"y0 has {len(cfg['y0'])} entries, expected J={J}", "schema")
    return cfg


class _Setup:
    def __init__(self, cfg):
        t = cfg["time"]
        self.model = build_dirichlet_laplacian_1d(cfg["model"]["J"])
        try:
            self.gram = gram_matrix(self.model, cfg["G"])
            noise = cfg["noise"]
            F = noise.get("F_sched", noise.get("F", 0.0))
            if isinstance(F, list) and len(F) != t["K"]:
                raise ValueError(f"F_sched has {len(F)} entries, expected K={t['K']}")
            self.F = F
            self.tree = build_tree(t["K"], t["T"], t["T_tilde"], F)
        except ValueError as exc:
            raise ConfigError(str(exc), "grid" if "grid" in str(exc) else "invalid") from exc
        self.y0 = np.asarray(cfg["y0"], dtype=float)


def _contract(name, value, tol, passed):
    return {"name": name, "value": value, "tolerance": tol, "passed": bool(passed)}


# problems


def _simulate(cfg, st, out, threads):
    p = cfg["parameters"]
    tol = p["tolerances"]
    u = None
    if "u" in p:
        arr = np.asarray(p["u"], dtype=float)
        level = int(round(math.log2(arr.shape[0])))
        if 1 << level != arr.shape[0]:
            raise ConfigError("control rows must be a power of two", "invalid")
        u = AdaptedField(level, arr)
    try:
        traj = forward_evolve(st.model, st.gram, st.tree, st.y0, u)
    except ValueError as exc:
        raise ConfigError(str(exc), "invalid") from exc
    yT2 = traj.terminal.norm2()
    res = {"terminal_norm": yT2, "terminal_mean": traj.terminal.values.mean(axis=0).tolist()}
    contracts = []
    if u is None:
        lam = st.model.eigenvalues
        exact = float(np.sum(np.exp(-2 * lam * st.tree.horizon) * st.y0**2)) * st.tree.energy_factor(0, st.tree.depth)
        err = abs(yT2 - exact) / max(exact, 1e-300)
        res["free_energy_oracle"] = exact
        contracts.append(_contract("free_energy_identity", err, tol["energy"], err <= tol["energy"]))
    write_text(os.path.join(out, "trajectory.csv"), traj.to_csv())
    return res, contracts


def _problem(cfg, st, epsilon=None):
    p = cfg["parameters"]
    l = None if p["l"] == "auto" else float(p["l"])
    try:
        return HUMProblem(
            st.model, st.gram, st.tree, st.y0, p["epsilon"] if epsilon is None else epsilon,
            weight=l, measurability=p["class"], convention=p["convention"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc), "invalid") from exc


def _cert_contracts(cert, tol, prefix=""):
    out = []
    for name, (val, bound, ok) in cert.contracts(tol["steering"], tol["slack"], tol["chain"]).items():
        out.append(_contract(prefix + name, val, bound, ok))
    return out


def _hum(cfg, st, out, threads):
    tol = cfg["parameters"]["tolerances"]
    cert = synthesize(_problem(cfg, st))
    write_text(os.path.join(out, "eta_star.csv"), cert.eta_star.to_csv())
    write_text(os.path.join(out, "control.csv"), cert.u.to_csv())
    res = {"certificate": cert.to_dict()}
    if cert.convention != "adjoint":
        res["note"] = "paper-reversed pairing carries no exactness contract"
    return res, _cert_contracts(cert, tol)


def _sweep(cfg, st, out, threads):
    p = cfg["parameters"]
    certs = epsilon_sweep(_problem(cfg, st), p["epsilons"], threads=threads)
    write_text(os.path.join(out, "sweep.csv"), sweep_csv(certs))
    contracts = []
    for c in certs:
        contracts += _cert_contracts(c, p["tolerances"], prefix=f"eps={c.epsilon:g}:")
    return {"points": [c.to_dict() for c in certs]}, contracts


def _norm_opt(cfg, st, out, threads):
    p = cfg["parameters"]
    tol = p["tolerances"]
    try:
        r = norm_optimal(st.model, st.gram, st.tree, st.y0, p["epsilon"], p["class"])
    except ValueError as exc:
        if isinstance(exc, NonObservableError):
            raise
        raise ConfigError(str(exc), "invalid") from exc
    probe = uniqueness_probe(r, perturbations=2, seed=cfg["seed"])
    write_text(os.path.join(out, "u_star.csv"), r.u_star.to_csv())
    bound = tol["constraint"] * r.target
    dev_tol = 1e-7 * max(1.0, math.sqrt(r.value))
    contracts = [
        _contract("constraint", r.constraint_residual, bound, r.constraint_residual <= bound),
        _contract("uniqueness", probe["max_deviation"], dev_tol, probe["max_deviation"] <= dev_tol),
        _contract("parallelogram", probe["parallelogram"], 0.0, probe["parallelogram"] == 0.0),
    ]
    return {"norm_optimal": r.to_dict(), "uniqueness": probe}, contracts


def _time_opt(cfg, st, out, threads):
    p = cfg["parameters"]
    tol = p["tolerances"]
    if "M" not in p or "T_grid" not in p:
        raise ConfigError("time-opt needs parameters.M and parameters.T_grid", "schema")
    dt = p.get("dt", st.tree.dt)
    try:
        r = time_optimal(
            st.model, st.gram, st.y0, p["epsilon"], p["M"], cfg["time"]["T_tilde"], p["T_grid"],
            dt=dt, noise=st.F, measurability=p["class"], threads=threads,
        )
    except ValueError as exc:
        raise ConfigError(str(exc), "invalid") from exc
    write_text(os.path.join(out, "scan.csv"), scan_csv(r))
    res = {"time_optimal": r.to_dict()}
    if not r.feasible:
        return res, []
    tree = r.context[2]
    bb = bang_bang_check(st.model, st.gram, tree, r, trials=p["trials"], seed=cfg["seed"], tol=tol["maximality"])
    res["bang_bang"] = bb
    M2 = p["M"] ** 2
    prev = [row for row in r.scan if row[0] < r.T_star - 1e-12 * r.T_star]
    prev_ok = not prev or max(prev, key=lambda row: row[0])[1] > M2
    at = [row for row in r.scan if abs(row[0] - r.T_star) <= 1e-12 * r.T_star]
    contracts = [
        _contract("admissible_at_T_star", at[0][1] if at else math.nan, M2, bool(at) and at[0][1] <= M2),
        _contract("inadmissible_before_T_star", 1.0 if prev_ok else 0.0, 1.0, prev_ok),
    ]
    if r.active:
        prop = min(bb["proportionality_adjoint"], bb["proportionality_paper_reversed"])
        contracts += [
            _contract("bang_bang_norm", bb["norm_gap"], tol["norm"] * M2, bb["norm_gap"] <= tol["norm"] * M2),
            _contract("proportionality", prop, tol["proportionality"], prop <= tol["proportionality"]),
            _contract("maximality", bb["maximality_violations"], 0, bb["maximality_violations"] == 0),
        ]
    return res, contracts


def verify_suite(cfg, threads=1, out=None):
    """Run the inequality suite on a resolved config.

    Returns ``(result, contracts)``; each contract is a dict with name,
    value, tolerance and pass flag.
    """
    st = _Setup(cfg)
    p = cfg["parameters"]
    tol = p["tolerances"]
    rng = np.random.default_rng(cfg["seed"])
    m, g, tree = st.model, st.gram, st.tree
    K, J, k = tree.depth, m.dim, tree.impulse_level
    res, contracts = {}, []

    # duality over a fuzz corpus
    def one(i):
        r = np.random.default_rng([cfg["seed"], i])
        lvl = int(r.integers(0, k + 1))
        u = AdaptedField(lvl, r.standard_normal((1 << lvl, J)))
        eta = AdaptedField(K, r.standard_normal((1 << K, J)))
        return duality_report(m, g, tree, r.standard_normal(J), u, eta).residual

    n_dual = min(p["trials"], 50)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            dual = list(ex.map(one, range(n_dual)))
    else:
        dual = [one(i) for i in range(n_dual)]
    res["duality_max_residual"] = max(dual)
    contracts.append(_contract("duality", max(dual), tol["duality"], max(dual) <= tol["duality"]))

    # decay above a mid-spectrum cutoff
    lam = float(m.eigenvalues[max(J // 2 - 1, 0)]) if J > 1 else 0.5 * float(m.eigenvalues[0])
    dec = decay_check(m, tree, lam, trials=p["trials"], seed=int(rng.integers(1 << 31)), tol=tol["decay"])
    res["decay"] = dec.to_dict()
    contracts.append(_contract("decay", dec.max_violation, tol["decay"], dec.violations == 0))

    # spectral inequality
    spec = spectral_report(m, g)
    C, _, rec = spectral_witness(m, g, float(m.eigenvalues[-1]))
    res["spectral"] = spec.to_dict()
    res["spectral"]["attainment_residual"] = rec
    mono = all(b >= a * (1 - 1e-12) for a, b in zip(spec.constants, spec.constants[1:]))
    contracts.append(_contract("spectral_attainment", rec, tol["attainment"], rec <= tol["attainment"]))
    contracts.append(_contract("spectral_monotone", 1.0 if mono else 0.0, 1.0, mono))

    # observability over all levels and over the upper half
    obs_all = observability_constant(m, g, tree, range(K + 1))
    obs_half = observability_constant(m, g, tree, range(K // 2, K + 1))
    res["observability"] = {"all_levels": obs_all.to_dict(), "upper_half": obs_half.to_dict()}
    ok = math.isfinite(obs_all.constant) and obs_half.constant >= obs_all.constant * (1 - 1e-10)
    contracts.append(_contract("observability_monotone", obs_half.constant, obs_all.constant, ok))

    # interpolation at the impulse level
    itp = interpolation_check(m, g, tree, k, p["theta"], trials=min(p["trials"], 50), seed=cfg["seed"])
    res["interpolation"] = itp.to_dict()
    contracts.append(_contract("interpolation_sup", itp.fuzz_max, itp.sup_constant, itp.consistent))

    # approximate observability constants over eps
    po1 = po1_sweep(m, g, tree, k, p["epsilons"], threads=threads)
    res["po1"] = po1
    contracts.append(_contract("po1_nonincreasing", 1.0 if po1["nonincreasing"] else 0.0, 1.0, po1["nonincreasing"]))

    # steering identity and certificate chain
    cert = synthesize(_problem(cfg, st))
    res["certificate"] = cert.to_dict()
    contracts += _cert_contracts(cert, tol)

    if out is not None:
        rows = [(lam_, c, b, e) for lam_, c, b, e in spec.rows()]
        rows += [(e, c, b, 0.5) for e, c, b in zip(po1["epsilons"], po1["constants"], po1["bounds"])]
        write_text(os.path.join(out, "inequalities.csv"), report_csv(rows))
    return res, contracts


def _verify(cfg, st, out, threads):
    return verify_suite(cfg, threads=threads, out=out)


HANDLERS = {
    "simulate": _simulate,
    "hum": _hum,
    "norm-opt": _norm_opt,
    "time-opt": _time_opt,
    "verify": _verify,
    "sweep": _sweep,
}


def run(config, out_dir=None, problem=None, convention=None, klass=None, threads=1, stream=None):
    """Run one configured problem and write its artifacts.

    Parameters
    ----------
    config : dict
        Raw configuration (validated here).
    out_dir : str, optional
        Overrides ``config["output_dir"]``; defaults to ``"out"``.

    Returns
    -------
    int
        Exit status (0 pass, 1 contract failure, 2 error).
    """
    stream = sys.stderr if stream is None else stream
    out = os.fspath(out_dir or config.get("output_dir") or "out")
    os.makedirs(out, exist_ok=True)
    try:
        cfg = resolve_config(config, problem, convention, klass)
        cfg["output_dir"] = out
        write_json(
            os.path.join(out, "manifest.json"),
            {
                "package": "stochimpulse",
                "version": __version__,
                "schema": "stochimpulse-config/v1",
                "command": cfg["problem"],
                "threads": threads,
                "config": cfg,
                "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            },
        )
        st = _Setup(cfg)
        result, contracts = HANDLERS[cfg["problem"]](cfg, st, out, threads)
    except ConfigError as exc:
        return _error(out, exc.code, str(exc), stream)
    except NonObservableError as exc:
        return _error(out, "non-observable", str(exc), stream)
    except ConvergenceError as exc:
        return _error(out, "convergence", f"{exc} (residual {exc.residual:.3e})", stream)
    failed = [c for c in contracts if not c["passed"]]
    _discard(out, "error.json")
    write_json(
        os.path.join(out, "result.json"),
        {
            "command": cfg["problem"],
            "result": result,
            "contracts": contracts,
            "passed": not failed,
            "failed": [c["name"] for c in failed],
        },
    )
    for c in failed:
        print(f"FAILED {c['name']}: value {c['value']!r} vs tolerance {c['tolerance']!r}", file=stream)
    return 1 if failed else 0


def _discard(out, name):
    path = os.path.join(out, name)
    if os.path.exists(path):
        os.remove(path)


def _error(out, code, message, stream):
    os.makedirs(out, exist_ok=True)
    _discard(out, "result.json")
    write_json(os.path.join(out, "error.json"), {"error": code, "message": message})
    print(f"error [{code}]: {message}", file=stream)
    return 2


def build_parser():
    ap = argparse.ArgumentParser(prog="stochimpulse", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON experiment configuration")
        sp.add_argument("--out", help="output directory (default: config output_dir or ./out)")
        sp.add_argument("--convention", choices=["adjoint", "paper-reversed"])
        sp.add_argument("--class", dest="klass", choices=["at-impulse", "paper-restricted"])
        sp.add_argument("--threads", type=int, default=1)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error [invalid]: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        return _error(args.out or "out", exc.code, str(exc), sys.stderr)
    return run(config, args.out, args.command, args.convention, args.klass, args.threads)


if __name__ == "__main__":
    sys.exit(main())
