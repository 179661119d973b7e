"""Batch runs driven by a JSON configuration.

    filmhom <cell|table|film|gamma|check|recover> --config run.json [--out DIR] [--seed N] [--threads N]

Exit status: 0 success, 1 computed but flagged (non-convergence or a failed
check), 2 error.  Every JSON artifact embeds the fully materialized config,
so ``parse_config`` of that echo reproduces the run; the only
non-deterministic content is the ``metadata`` block.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .cell import CellProblem, DensityTable, build_density_table, solve_cell, t_converged
from .discretization import write_field
from .film import (
    FilmProblem,
    RecoveryParams,
    film_grid,
    minimize_film,
    planar_datum,
    recovery_diagnostics,
)
from .geometry import manifold_from_dict
from .integrand import integrand_from_dict
from .io import atomic_write, csv_text
from .verify import (
    reports_json,
    run_gamma_experiment,
    summary_table,
    verify_lipschitz_growth,
    verify_quasiconvexity,
    verify_rank_one,
)

log = logging.getLogger(__name__)

COMMANDS = ("cell", "table", "film", "gamma", "check", "recover")
SUITES = ("quasiconvexity", "lipschitz_growth", "rank_one")


class SchemaError(ValueError):
    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = path


class RangeError(ValueError):
    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = path


# ---------------------------------------------------------------- schema primitives

_REQ = object()


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _float(v, path):
    if not _is_num(v):
        raise SchemaError(path, f"expected a number, got {type(v).__name__}")
    return float(v)


def _int(v, path):
    if isinstance(v, bool) or not (isinstance(v, int) or (isinstance(v, float) and v.is_integer())):
        raise SchemaError(path, "expected an integer")
    return int(v)


def _str(choices):
    def check(v, path):
        if not isinstance(v, str):
            raise SchemaError(path, "expected a string")
        if v not in choices:
            raise SchemaError(path, f"expected one of {list(choices)}, got {v!r}")
        return v
    return check


def _vec(length, item=_float):
    def check(v, path):
        if not isinstance(v, list) or (length is not None and len(v) != length):
            raise SchemaError(path, f"expected a list of length {length}" if length else "expected a list")
        return [item(x, f"{path}[{i}]") for i, x in enumerate(v)]
    return check


def _check_str(v, path):
    if not isinstance(v, str):
        raise SchemaError(path, "expected a string")
    return v


def _mat32(v, path):
    return _vec(3, _vec(2))(v, path)


def _obj(fields):
    """Validator for a JSON object; ``fields`` maps key -> (validator, default or _REQ)."""
    def check(v, path):
        if not isinstance(v, dict):
            raise SchemaError(path or ".", "expected an object")
        for key in v:
            if key not in fields:
                raise SchemaError(f"{path}.{key}", "unknown key")
        out = {}
        for key, (validate, default) in fields.items():
            if key in v:
                out[key] = validate(v[key], f"{path}.{key}")
            elif default is _REQ:
                raise SchemaError(f"{path}.{key}", "required key missing")
            elif default is not None:
                out[key] = validate(json.loads(json.dumps(default)), f"{path}.{key}")
        return out
    return check


def _tagged(kinds):
    """Object whose schema is selected by its ``kind`` entry."""
    def check(v, path):
        if not isinstance(v, dict) or "kind" not in v:
            raise SchemaError(f"{path}.kind", "required key missing")
        kind = _str(tuple(kinds))(v["kind"], f"{path}.kind")
        return {"kind": kind, **_obj(kinds[kind])({k: x for k, x in v.items() if k != "kind"}, path)}
    return check


_MANIFOLD = _tagged({
    "sphere": {"radius": (_float, 1.0)},
    "torus": {"R": (_float, _REQ), "r": (_float, _REQ)},
    "plane": {"point": (_vec(3), [0.0, 0.0, 0.0]), "normal": (_vec(3), [0.0, 0.0, 1.0])},
})

_COEFF = _tagged({
    "constant": {"a0": (_float, 1.0)},
    "laminate": {"a1": (_float, 1.0), "a2": (_float, 4.0), "theta": (_float, 0.5), "axis": (_int, 1)},
    "checkerboard": {"a1": (_float, 1.0), "a2": (_float, 4.0)},
    "grid": {"path": (_check_str, None), "shape": (_vec(3, _int), None),
             "values": (_vec(None), None)},
})


_INTEGRAND = _obj({
    "form": (_str(("isotropic", "column_weighted")), "isotropic"),
    "p": (_float, 2.0),
    "weights": (_vec(3), [1.0, 1.0, 1.0]),
    "coeff": (_COEFF, {"kind": "constant", "a0": 1.0}),
})

_CELL = _obj({
    "s": (_vec(3), None),
    "xi_alpha": (_mat32, [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]),
    "t_list": (_vec(None, _int), [1, 2, 4]),
    "n": (_int, 32),
    "formulation": (_str(("penalized", "constrained")), "penalized"),
    "lateral": (_str(("periodic", "zero")), "periodic"),
    "tol": (_float, 1e-8),
})

_TABLE = _obj({
    "s_list": (_vec(None, _vec(3)), None),
    "xi_max": (_float, 1.0),
    "m": (_int, 5),
    "t_list": (_vec(None, _int), [1, 2, 4]),
    "n": (_int, 32),
    "path": (_check_str, None),
})

_FILM = _obj({
    "h_list": (_vec(None), [0.5, 0.25, 0.125]),
    "datum": (_obj({"s0": (_vec(3), None), "xi0": (_mat32, [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]])}), {}),
    "grid": (_obj({"per_period": (_int, 8), "n3": (_int, 2), "planar": (_vec(2, _int), [17, 17])}), {}),
    "delta": (_float, 0.45),
    "tol": (_float, 1e-8),
})

_CHECK = _obj({
    "suites": (_vec(None, _str(SUITES)), list(SUITES)),
    "slack_overrides": (lambda v, p: _slacks(v, p), {}),
    "n_tests": (_int, 50),
    "n_segments": (_int, 100),
    "xi_alpha": (_mat32, [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]),
})


def _slacks(v, path):
    if not isinstance(v, dict):
        raise SchemaError(path, "expected an object")
    out = {}
    for k, x in v.items():
        if k not in SUITES:
            raise SchemaError(f"{path}.{k}", "unknown suite")
        out[k] = _float(x, f"{path}.{k}")
    return out


_ROOT = _obj({
    "manifold": (_MANIFOLD, _REQ),
    "integrand": (_INTEGRAND, {}),
    "cell": (_CELL, {}),
    "table": (_TABLE, {}),
    "film": (_FILM, {}),
    "check": (_CHECK, {}),
    "epsilon": (_float, 1e-6),
    "quadrature": (_int, 2),
    "seed": (_int, 42),
    "output": (_check_str, "out"),
})


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class RunConfig:
    data: dict

    def __getitem__(self, key):
        return self.data[key]

    def echo(self) -> dict:
        return json.loads(json.dumps(self.data))

    def manifold(self):
        return manifold_from_dict(self.data["manifold"])

    def integrand(self):
        return integrand_from_dict(self.data["integrand"])


def _default_point(man: dict):
    if man["kind"] == "sphere":
        return [0.0, 0.0, man["radius"]]
    if man["kind"] == "torus":
        return [man["R"] + man["r"], 0.0, 0.0]
    return list(man["point"])


def _ranges(d: dict):
    m = d["manifold"]
    if m["kind"] == "sphere" and not m["radius"] > 0:
        raise RangeError(".manifold.radius", "radius must be positive")
    if m["kind"] == "torus" and not 0 < m["r"] < m["R"]:
        raise RangeError(".manifold.r", "torus radii must satisfy 0 < r < R")
    if m["kind"] == "plane" and np.linalg.norm(m["normal"]) == 0:
        raise RangeError(".manifold.normal", "normal must be nonzero")
    f = d["integrand"]
    if not f["p"] > 1:
        raise RangeError(".integrand.p", "growth exponent must satisfy 1 < p < inf")
    c = f["coeff"]
    if c["kind"] == "laminate":
        if not 0 < c["theta"] < 1:
            raise RangeError(".integrand.coeff.theta", "volume fraction theta must lie in (0, 1)")
        if c["axis"] not in (1, 2):
            raise RangeError(".integrand.coeff.axis", "laminate axis must be 1 or 2")
    for key in ("a0", "a1", "a2"):
        if key in c and not c[key] > 0:
            raise RangeError(f".integrand.coeff.{key}", "coefficient values must be positive")
    if c["kind"] == "grid" and "path" not in c and not ("shape" in c and "values" in c):
        raise SchemaError(".integrand.coeff", "grid coefficient needs 'path' or 'shape' and 'values'")
    if min(f["weights"]) <= 0:
        raise RangeError(".integrand.weights", "column weights must be positive")
    for blk in ("cell", "table"):
        if d[blk]["n"] < 4:
            raise RangeError(f".{blk}.n", "grid resolution must be at least 4")
        ts = d[blk]["t_list"]
        if not ts or min(ts) < 1 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise RangeError(f".{blk}.t_list", "t_list must be strictly increasing positive integers")
    if d["table"]["m"] < 3:
        raise RangeError(".table.m", "tables need at least 3 points per axis")
    if not d["table"]["xi_max"] > 0:
        raise RangeError(".table.xi_max", "xi_max must be positive")
    hs = d["film"]["h_list"]
    if not hs or any(not 0 < h <= 1 for h in hs) or any(b >= a for a, b in zip(hs, hs[1:])):
        raise RangeError(".film.h_list", "h_list must be strictly decreasing values in (0, 1]")
    if not 0 < d["film"]["delta"] < 1:
        raise RangeError(".film.delta", "cut-off radius must lie in (0, 1)")
    if not d["epsilon"] >= 0:
        raise RangeError(".epsilon", "regularization must be nonnegative")
    if d["quadrature"] not in (1, 2):
        raise RangeError(".quadrature", "quadrature order must be 1 or 2")


def parse_config(text: str) -> RunConfig:
    """Validate a JSON document and materialize every default."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(".", f"malformed JSON: {exc}") from exc
    d = _ROOT(raw, "")
    _ranges(d)
    s = d["cell"].setdefault("s", _default_point(d["manifold"]))
    d["table"].setdefault("s_list", [list(s)])
    d["film"]["datum"].setdefault("s0", list(s))
    return RunConfig(d)


# ---------------------------------------------------------------- subcommands

class _Run:
    def __init__(self, cfg: RunConfig, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.manifold = cfg.manifold()
        self.integrand = cfg.integrand()

    def write(self, name, text):
        atomic_write(self.out / name, text)

    def write_json(self, name, payload):
        doc = {**payload, "config": self.cfg.echo(),
               "metadata": {"timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(), "version": __version__}}
        self.write(name, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def cell_options(self, block):
        return {"eps": self.cfg["epsilon"], "quadrature": self.cfg["quadrature"], "tol": block.get("tol", 1e-8)}

    def table(self) -> DensityTable:
        tb = self.cfg["table"]
        if "path" in tb:
            return DensityTable.load(tb["path"])
        table = build_density_table(self.integrand, self.manifold, tb["s_list"], tb["xi_max"], tb["m"],
                                    tb["t_list"], tb["n"], threads=self.threads,
                                    eps=self.cfg["epsilon"], quadrature=self.cfg["quadrature"])
        table.save(self.out / "table")
        return table

    def film_problem(self, h=None) -> FilmProblem:
        fb = self.cfg["film"]
        h = fb["h_list"][0] if h is None else h
        return FilmProblem(self.integrand, self.manifold, h, fb["datum"]["s0"], fb["datum"]["xi0"],
                           film_grid(h, fb["grid"]["per_period"], fb["grid"]["n3"]), self.cfg["epsilon"],
                           self.cfg["quadrature"])

    # each returns True when the results carry no flags
    def cell(self):
        cb = self.cfg["cell"]
        rows, values, ok, last = [], [], True, None
        for t in cb["t_list"]:
            sol = solve_cell(CellProblem(self.integrand, self.manifold, cb["s"], cb["xi_alpha"], t=t,
                                         formulation=cb["formulation"], n=cb["n"], lateral=cb["lateral"],
                                         **self.cell_options(cb)))
            rows.append((t, cb["n"], cb["formulation"], cb["lateral"], sol.value, int(sol.converged),
                         sol.gradient_residual, sol.iterations))
            values.append(sol.value)
            ok = ok and sol.converged
            last = sol
        tconv = t_converged(values)
        self.write("cell.csv", csv_text(["t", "n", "formulation", "lateral", "value", "converged", "residual",
                                         "iterations"], rows))
        self.write("cell_log.csv", last.log_records())
        self.write_json("cell.json", {"estimate": values[-1], "values": dict(zip(map(str, cb["t_list"]), values)),
                                      "t_converged": tconv, "solver_converged": ok})
        print(f"cell value {values[-1]:.10g} (t={cb['t_list'][-1]}, n={cb['n']})")
        return ok and (tconv or len(values) == 1)

    def table_cmd(self):
        table = self.table()
        n_bad = int((~table.converged).sum())
        print(f"table with {table.values.size} entries, {n_bad} unconverged")
        return n_bad == 0

    def film(self):
        fb = self.cfg["film"]
        rows, ok, res = [], True, None
        for h in fb["h_list"]:
            res = minimize_film(self.film_problem(h), tol=fb["tol"])
            rows.append((h, res.energy, res.iterations, res.residual, int(res.converged)))
            ok = ok and res.converged
        self.write("film.csv", csv_text(["h", "E_h", "iters", "residual", "converged"], rows))
        write_field(res.field, self.out / "film_field.txt")
        self.write_json("film.json", {"h": [r[0] for r in rows], "E_h": [r[1] for r in rows],
                                      "converged": [bool(r[4]) for r in rows]})
        for r in rows:
            print(f"h={r[0]:<8g} E_h={r[1]:.10g}")
        return ok

    def gamma(self):
        fb = self.cfg["film"]
        table = self.table()
        rep = run_gamma_experiment(self.film_problem(), table, fb["h_list"], fb["grid"]["per_period"],
                                   fb["grid"]["n3"], tuple(fb["grid"]["planar"]), fb["delta"], fb["tol"],
                                   threads=self.threads)
        self.write("gamma.csv", rep.to_csv())
        self.write_json("gamma.json", rep.to_dict())
        print(summary_table([rep]))
        return not any(rep.flags)

    def check(self):
        ck = self.cfg["check"]
        table = self.table()
        s = table.base_points[0]
        slack = ck["slack_overrides"]
        reports = []
        for name in ck["suites"]:
            kw = {} if name not in slack else ({"tolerance": slack[name]} if name == "lipschitz_growth"
                                                else {"slack": slack[name]})
            if name == "quasiconvexity":
                reports.append(verify_quasiconvexity(table, s, ck["xi_alpha"], ck["n_tests"], self.cfg["seed"], **kw))
            elif name == "rank_one":
                reports.append(verify_rank_one(table, s, ck["n_segments"], self.cfg["seed"], **kw))
            else:
                reports.append(verify_lipschitz_growth(table, **kw))
        self.write_json("check.json", {"reports": json.loads(reports_json(reports))})
        print(summary_table(reports))
        return all(r.passed for r in reports)

    def recover(self):
        fb = self.cfg["film"]
        table = self.table()
        prob = self.film_problem()
        per, n3 = fb["grid"]["per_period"], fb["grid"]["n3"]
        cell = solve_cell(CellProblem(self.integrand, self.manifold, prob.s0, prob.xi0, t=1,
                                      formulation="constrained", n=per, n3=n3, eps=self.cfg["epsilon"],
                                      quadrature=self.cfg["quadrature"], tol=fb["tol"]))
        params = RecoveryParams(prob.s0, cell.argmin, fb["delta"])
        finest = film_grid(fb["h_list"][-1], per, n3)
        u = planar_datum(prob, finest[:2])
        diag = recovery_diagnostics(prob, u, params, table, fb["h_list"], per, n3)
        self.write("recovery.csv", diag.to_csv())
        self.write_json("recovery.json", {"h": diag.h, "sup_dist": diag.sup_dist, "ratios": diag.ratios,
                                          "energy": diag.energy, "limit_energy": diag.limit_energy})
        for h, r, e in zip(diag.h, diag.ratios, diag.energy):
            print(f"h={h:<8g} sup/h={r:.6g} energy={e:.10g}")
        print(f"limit energy {diag.limit_energy:.10g}")
        return cell.converged


def dispatch(cmd: str, cfg: RunConfig, out=None, threads: int = 1) -> int:
    """Run a subcommand; returns the exit status."""
    if cmd not in COMMANDS:
        print(f"error: unknown command {cmd!r}", file=sys.stderr)
        return 2
    run = _Run(cfg, Path(out if out is not None else cfg["output"]), threads)
    method = {"table": run.table_cmd}.get(cmd) or getattr(run, cmd)
    try:
        clean = method()
    except Exception as exc:
        print(f"error: {cmd} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0 if clean else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="filmhom", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        text = Path(args.config).read_text()
        raw = json.loads(text)
        if args.seed is not None and isinstance(raw, dict):
            raw["seed"] = args.seed
        cfg = parse_config(json.dumps(raw))
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return dispatch(args.command, cfg, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
