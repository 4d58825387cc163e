"""Run configuration, benchmark presets, field/report files and the command line driver.

Configuration files are flat INI-style text::

    [mesh]
    nx = 160          # comments start with '#'
    ny = 80

Unknown sections or keys are rejected.  Lists are comma separated.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schema

def _floats(text):
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text):
    return tuple(int(t) for t in text.split(",") if t.strip())


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str(text):
    return text.strip()


SCHEMA = {
    "mesh": {"nx": (int, 160), "ny": (int, 80), "lx": (float, 2.0), "ly": (float, 1.0)},
    "boundary": {"dirichlet": (_str, "left"), "traction_side": (_str, ""), "traction_start": (float, 0.45),
                 "traction_stop": (float, 0.55)},
    "material": {"young": (float, 1.0), "poisson": (float, 0.3), "mu": (_floats, ()), "lame": (_floats, ()),
                 "rho": (_floats, ()), "alpha_void": (float, 2e-4), "beta_void": (float, 1e-4), "k": (int, 1),
                 "l": (int, 2), "omega": (float, 0.1), "representation": (_str, "scalar")},
    "model": {"eps": (_floats, (0.02,)), "gamma": (float, 1e-4), "mean": (_floats, (0.0,)),
              "rho_box": (_floats, (1.9, 2.0, 0.45, 0.55)), "rho_factor": (float, 100.0),
              "clamp_box": (_bool, True)},
    "objective": {"indices": (_ints, ()), "weights": (_floats, ()), "compliance_weight": (float, 0.0),
                  "g": (_floats, (0.0, -1.0))},
    "optimizer": {"tol_rel": (float, 1e-3), "tol_abs": (float, 0.0), "max_iter": (int, 2000),
                  "mode": (_str, "projection"), "delta": (_floats, (1e-3,)), "tau0": (float, 1.0)},
    "init": {"kind": (_str, "checkerboard"), "value": (_floats, ()), "path": (_str, "")},
    "run": {"seed": (int, 42), "output": (_str, "specopt_out"), "name": (_str, "run")},
}


@dataclass
class RunConfig:
    """Validated experiment description; one attribute dict per section."""

    mesh: dict
    boundary: dict
    material: dict
    model: dict
    objective: dict
    optimizer: dict
    init: dict
    run: dict
    source: str = field(default="", repr=False)

    @property
    def schedule(self) -> tuple[float, ...]:
        return self.model["eps"]

    @property
    def seed(self) -> int:
        return self.run["seed"]

    def with_overrides(self, **sections) -> "RunConfig":
        data = {k: dict(getattr(self, k)) for k in SCHEMA}
        for sec, vals in sections.items():
            data[sec].update(vals)
        cfg = RunConfig(**data, source=self.source)
        _validate(cfg)
        return cfg


def parse_config(text: str) -> RunConfig:
    """Parse and validate configuration text (see module docstring)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                       interpolation=None, default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"line {exc.lineno}: key outside a [section]") from exc
    except configparser.ParsingError as exc:
        lines = ", ".join(str(ln) for ln, _ in exc.errors)
        raise ConfigError(f"syntax error at line {lines}") from exc
    except configparser.Error as exc:
        ln = getattr(exc, "lineno", "?")
        raise ConfigError(f"line {ln}: {exc.message}") from exc
    data = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key '{sec}.{key}'")
            conv = SCHEMA[sec][key][0]
            try:
                data[sec][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"invalid value for '{sec}.{key}': {raw!r}") from exc
    if not parser.has_section("objective") or not any(parser.items("objective")):
        raise ConfigError("no objective terms")
    cfg = RunConfig(**data, source=text)
    _validate(cfg)
    return cfg


def _require(cond, key, msg):
    if not cond:
        raise ConfigError(f"'{key}': {msg}")


def _validate(cfg: RunConfig):
    m = cfg.mesh
    _require(m["nx"] >= 1 and m["ny"] >= 1, "mesh.nx", "mesh needs at least one element per direction")
    _require(m["lx"] > 0 and m["ly"] > 0, "mesh.lx", "domain lengths must be positive")
    mat = cfg.material
    _require(mat["young"] > 0, "material.young", "must be positive")
    _require(-1.0 < mat["poisson"] < 0.5, "material.poisson", "must lie in (-1, 0.5)")
    _require(mat["representation"] in ("scalar", "vector"), "material.representation", "scalar or vector")
    _require(mat["alpha_void"] > 0 and mat["beta_void"] > 0, "material.alpha_void", "void factors must be positive")
    _require(mat["omega"] > 0, "material.omega", "must be positive")
    n_mat = max(len(mat["mu"]), 1)
    _require(len(mat["mu"]) == len(mat["lame"]), "material.lame", "needs one value per entry of material.mu")
    _require(not mat["rho"] or len(mat["rho"]) == n_mat, "material.rho", "needs one value per material")
    _require(all(v > 0 for v in mat["mu"] + mat["rho"]), "material.mu", "must be positive")
    _require(mat["representation"] == "vector" or n_mat == 1, "material.representation",
             "several materials need the vector representation")
    mod = cfg.model
    eps = mod["eps"]
    _require(len(eps) >= 1 and all(e > 0 for e in eps), "model.eps", "needs positive values")
    _require(all(b < a for a, b in zip(eps, eps[1:])), "model.eps", "schedule must be strictly decreasing")
    _require(mod["gamma"] > 0, "model.gamma", "must be positive")
    _require(mod["rho_factor"] > 0, "model.rho_factor", "must be positive")
    _require(len(mod["rho_box"]) in (0, 4), "model.rho_box", "needs x0, x1, y0, y1")
    N = n_mat + 1
    mean = mod["mean"]
    if mat["representation"] == "scalar":
        _require(len(mean) == 1 and -1 < mean[0] < 1, "model.mean", "scalar mean must lie in (-1, 1)")
    else:
        _require(len(mean) == N and all(0 < v < 1 for v in mean) and abs(sum(mean) - 1) < 1e-12,
                 "model.mean", f"needs {N} fractions in (0, 1) summing to 1")
    obj = cfg.objective
    _require(len(obj["indices"]) == len(obj["weights"]), "objective.weights", "one weight per eigenvalue index")
    _require(all(i >= 1 for i in obj["indices"]), "objective.indices", "indices are 1-based")
    _require(len(obj["g"]) == 2, "objective.g", "needs two components")
    if obj["compliance_weight"]:
        _require(cfg.boundary["traction_side"] != "", "boundary.traction_side", "compliance needs a traction side")
    opt = cfg.optimizer
    _require(opt["mode"] in ("projection", "penalty"), "optimizer.mode", "projection or penalty")
    _require(opt["tol_rel"] >= 0 and opt["tol_abs"] >= 0, "optimizer.tol_rel", "must be nonnegative")
    _require(opt["max_iter"] >= 0, "optimizer.max_iter", "must be nonnegative")
    _require(all(d > 0 for d in opt["delta"]), "optimizer.delta", "must be positive")
    _require(all(b < a for a, b in zip(opt["delta"], opt["delta"][1:])), "optimizer.delta",
             "schedule must be strictly decreasing")
    _require(opt["tau0"] > 0, "optimizer.tau0", "must be positive")
    _require(cfg.init["kind"] in ("checkerboard", "constant", "file"), "init.kind", "checkerboard, constant or file")
    _require(cfg.init["kind"] != "file" or cfg.init["path"], "init.path", "file initialisation needs a path")


# ---------------------------------------------------------------------------
# presets

BEAM = """
[mesh]
nx = 160
ny = 80
lx = 2.0
ly = 1.0
[boundary]
dirichlet = left
[material]
young = 1.0
poisson = 0.3
alpha_void = 2e-4
beta_void = 1e-4
k = 1
l = 2
[model]
eps = {eps}
gamma = {gamma}
mean = 0.0
rho_box = 1.9, 2.0, 0.45, 0.55
rho_factor = 100
clamp_box = true
[objective]
indices = {indices}
weights = {weights}
compliance_weight = {compliance}
g = 0.0, -1.0
[init]
kind = checkerboard
[run]
name = {name}
"""

EPS_SCHEDULE = (0.08, 0.04, 0.02, 0.01, 0.005, 0.0025, 0.00125)
PRESETS = ("beam_eps", "beam_gamma", "beam_lam12", "beam_compliance")


def preset_text(name: str, alpha: float | None = None, gamma: float | None = None) -> str:
    """Configuration text of a benchmark preset."""
    if name == "beam_eps":
        text = BEAM.format(eps=", ".join(str(e) for e in EPS_SCHEDULE), gamma=gamma or 1e-4, indices=1,
                           weights=-1.0, compliance=0.0, name=name)
    elif name == "beam_gamma":
        text = BEAM.format(eps=0.02, gamma=gamma or 1e-5, indices=1, weights=-1.0, compliance=0.0, name=name)
    elif name == "beam_lam12":
        a = 0.0 if alpha is None else alpha
        text = BEAM.format(eps=0.02, gamma=gamma or 1e-4, indices="1, 2", weights=f"-1.0, {-a!r}",
                           compliance=0.0, name=f"{name}_alpha{a:g}")
    elif name == "beam_compliance":
        a = 10.0 if alpha is None else alpha
        text = BEAM.format(eps=0.02, gamma=gamma or 1e-3, indices=1, weights=repr(-a), compliance=1.0,
                           name=f"{name}_alpha{a:g}")
        text = text.replace("dirichlet = left", "dirichlet = left\ntraction_side = right\n"
                                                "traction_start = 0.45\ntraction_stop = 0.55")
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return text


def preset_config(name: str, alpha: float | None = None, gamma: float | None = None) -> RunConfig:
    return parse_config(preset_text(name, alpha, gamma))


# ---------------------------------------------------------------------------
# building the numerical problem

def material_model(cfg: RunConfig):
    from .materials import MaterialModel, Phase, lame_from_young

    mat = cfg.material
    if mat["mu"]:
        rhos = mat["rho"] or (1.0,) * len(mat["mu"])
        phases = tuple(Phase(m, l, r) for m, l, r in zip(mat["mu"], mat["lame"], rhos))
    else:
        mu, lam = lame_from_young(mat["young"], mat["poisson"])
        phases = (Phase(mu, lam, mat["rho"][0] if mat["rho"] else 1.0),)
    return MaterialModel(phases, mat["alpha_void"], mat["beta_void"], mat["k"], mat["l"], mat["omega"],
                         mat["representation"])


def build_mesh(cfg: RunConfig):
    from .mesh_fem import build_mesh as _build

    m = cfg.mesh
    return _build(m["nx"], m["ny"], m["lx"], m["ly"])


def clamp_mask(cfg: RunConfig, mesh) -> np.ndarray:
    """Nodes in the closed density box, held at pure material."""
    box = cfg.model["rho_box"]
    if not cfg.model["clamp_box"] or not box:
        return np.zeros(mesh.n_nodes, dtype=bool)
    x0, x1, y0, y1 = box
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    tol = 1e-9 * max(mesh.Lx, mesh.Ly)
    return (x >= x0 - tol) & (x <= x1 + tol) & (y >= y0 - tol) & (y <= y1 + tol)


class Setup:
    """Mesh, assembler and Problem factory for one configuration."""

    def __init__(self, cfg: RunConfig):
        from .mesh_fem import Assembler, DofMap, TractionSegment, box_density
        from .objective import ObjectiveSpec

        self.cfg = cfg
        self.mesh = build_mesh(cfg)
        sides = tuple(s.strip() for s in cfg.boundary["dirichlet"].split(",") if s.strip())
        self.asm = Assembler(self.mesh, DofMap(self.mesh, sides))
        self.material = material_model(cfg)
        obj = cfg.objective
        traction = None
        if cfg.boundary["traction_side"]:
            b = cfg.boundary
            traction = TractionSegment(b["traction_side"], b["traction_start"], b["traction_stop"])
        self.spec = ObjectiveSpec(obj["indices"], obj["weights"], cfg.model["gamma"], obj["compliance_weight"],
                                  traction, tuple(obj["g"]))
        box = cfg.model["rho_box"]
        self.rho = box_density(box, cfg.model["rho_factor"]) if box and cfg.model["rho_factor"] != 1.0 else None
        self.fixed = clamp_mask(cfg, self.mesh)
        mean = cfg.model["mean"]
        self.mean = mean[0] if self.material.scalar else np.asarray(mean)

    def problem(self, eps: float):
        from .objective import Problem

        return Problem(self.mesh, self.material, eps, self.spec, rho_spatial=self.rho, eig_seed=self.cfg.seed,
                       assembler=self.asm)

    def options(self, delta: float | None = None):
        from .optimizer import OptOptions

        o = self.cfg.optimizer
        return OptOptions(tol_rel=o["tol_rel"], tol_abs=o["tol_abs"], max_iter=o["max_iter"], tau0=o["tau0"],
                          mode=o["mode"], delta=delta if delta is not None else o["delta"][0])


# ---------------------------------------------------------------------------
# initial fields

def nodal_weights(mesh) -> np.ndarray:
    """Lumped (row-sum) mass of the bilinear elements."""
    w = np.zeros(mesh.n_nodes)
    np.add.at(w, mesh.elements.ravel(), 0.25 * mesh.hx * mesh.hy)
    return w


def initial_field(kind: str, mesh, value=None, path: str | None = None, n_phases: int = 2,
                  scalar: bool = True, mean=None, fixed=None) -> np.ndarray:
    """checkerboard: sign(v)|v|^0.3 with v = cos(3 pi x) cos(4 pi y); constant; or a field CSV.

    With ``mean`` given the checkerboard is projected onto the admissible set
    with that mean (``fixed`` nodes held at the first pure material).
    """
    phi = _raw_field(kind, mesh, value, path, n_phases, scalar)
    if mean is not None and kind == "checkerboard":
        from .optimizer import project_admissible

        fixed_value = 1.0 if scalar else np.eye(n_phases)[0]
        phi = project_admissible(phi, mean, nodal_weights(mesh), fixed, fixed_value).field
    return phi


def _raw_field(kind, mesh, value, path, n_phases, scalar):
    if kind == "checkerboard":
        x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
        v = np.cos(3 * np.pi * x) * np.cos(4 * np.pi * y)
        phi = np.sign(v) * np.abs(v) ** 0.3
        if scalar:
            return phi
        # material share from the scalar pattern, void takes the rest
        s = 0.5 * (1.0 + phi)
        out = np.zeros((mesh.n_nodes, n_phases))
        out[:, 0] = s
        out[:, -1] = 1.0 - s
        return out
    if kind == "constant":
        if value is None or len(np.atleast_1d(value)) == 0:
            raise ValueError("constant initialisation needs a value")
        v = np.atleast_1d(np.asarray(value, dtype=float))
        if scalar:
            return np.full(mesh.n_nodes, float(v[0]))
        if v.shape != (n_phases,):
            raise ValueError(f"constant vector field needs {n_phases} values")
        return np.tile(v, (mesh.n_nodes, 1))
    if kind == "file":
        return read_field(path, mesh)
    raise ValueError(f"unknown initial field kind {kind!r}")


# ---------------------------------------------------------------------------
# writers

def _fmt(v) -> str:
    return repr(float(v)) if math.isfinite(v) else "nan"


def _g17(v) -> str:
    return "%.17g" % v


def write_field(phi, mesh, path, point_data: dict | None = None):
    """Write ``<path>.csv`` (x, y, phi...) and ``<path>.vtk`` (legacy ASCII structured points)."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".csv", ".vtk") else path
    csv_path, vtk_path = Path(f"{stem}.csv"), Path(f"{stem}.vtk")
    phi = np.asarray(phi, dtype=float)
    cols = phi[:, None] if phi.ndim == 1 else phi
    names = ["phi"] if phi.ndim == 1 else [f"phi_{i + 1}" for i in range(cols.shape[1])]
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            fh.write(",".join(["x", "y"] + names) + "\n")
            for (x, y), row in zip(mesh.nodes, cols):
                fh.write(",".join(_g17(v) for v in (x, y, *row)) + "\n")
        with open(vtk_path, "w") as fh:
            fh.write("# vtk DataFile Version 3.0\nphase-field\nASCII\nDATASET STRUCTURED_POINTS\n")
            fh.write(f"DIMENSIONS {mesh.nx + 1} {mesh.ny + 1} 1\nORIGIN 0 0 0\n")
            fh.write(f"SPACING {_g17(mesh.hx)} {_g17(mesh.hy)} 1\nPOINT_DATA {mesh.n_nodes}\n")
            data = {n: cols[:, i] for i, n in enumerate(names)}
            data.update(point_data or {})
            for name, vals in data.items():
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                fh.write("\n".join(_g17(v) for v in np.asarray(vals, dtype=float)) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write field to {stem}: {exc}") from exc
    return csv_path


def read_field(path, mesh) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read field {path}: {exc}") from exc
    header, body = rows[0], rows[1:]
    if header[:2] != ["x", "y"] or len(header) < 3:
        raise ValueError(f"{path}: expected a field CSV with columns x,y,phi...")
    data = np.array(body, dtype=float)
    if data.shape[0] != mesh.n_nodes:
        raise ValueError(f"{path}: field has {data.shape[0]} nodes, mesh has {mesh.n_nodes}")
    if not np.allclose(data[:, :2], mesh.nodes, atol=1e-9 * max(mesh.Lx, mesh.Ly)):
        raise ValueError(f"{path}: node coordinates do not match the mesh")
    vals = data[:, 2:]
    return vals[:, 0].copy() if vals.shape[1] == 1 else vals.copy()


def history_header(n_eigen: int) -> list[str]:
    return ["iter", "J"] + [f"lambda_{i + 1}" for i in range(n_eigen)] + ["glandau", "compliance", "step", "gradnorm"]


def write_history(rows, path, n_eigen: int | None = None):
    """History CSV with header ``iter,J,lambda_1,...,glandau,compliance,step,gradnorm``."""
    rows = list(rows)
    k = n_eigen if n_eigen is not None else (len(rows[0].eigenvalues) if rows else 0)
    buf = io.StringIO()
    buf.write(",".join(history_header(k)) + "\n")
    for r in rows:
        vals = [str(r.iter), _fmt(r.J)] + [_fmt(v) for v in r.eigenvalues[:k]]
        vals += [_fmt(r.glandau), _fmt(r.compliance), _fmt(r.step), _fmt(r.gradnorm)]
        buf.write(",".join(vals) + "\n")
    _write_text(path, buf.getvalue())


def write_table(records, path, columns):
    """CSV table; ``records`` are dicts or sequences matching ``columns``."""
    buf = io.StringIO()
    buf.write(",".join(columns) + "\n")
    for rec in records:
        vals = [rec[c] for c in columns] if isinstance(rec, dict) else list(rec)
        buf.write(",".join(_fmt(v) for v in vals) + "\n")
    _write_text(path, buf.getvalue())


def _write_text(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# pipelines

@dataclass
class RunRecord:
    eps: float
    rows: list
    phi: np.ndarray = field(repr=False)
    status: str = ""
    diagnostics: dict = field(default_factory=dict)
    state: object = field(default=None, repr=False)

    @property
    def final(self):
        return self.rows[-1]


def run_config(cfg: RunConfig, phi0=None, out_dir: str | Path | None = None, verbose: bool = False) -> list[RunRecord]:
    """Optimise along the eps schedule (and the delta schedule in penalty mode)."""
    from .optimizer import Optimizer

    setup = Setup(cfg)
    if phi0 is None:
        init = cfg.init
        phi0 = initial_field(init["kind"], setup.mesh, init["value"], init["path"],
                             setup.material.n_phases, setup.material.scalar, setup.mean, setup.fixed)
    deltas = cfg.optimizer["delta"] if cfg.optimizer["mode"] == "penalty" else (None,)
    records = []
    phi = np.asarray(phi0, dtype=float)
    for eps in cfg.schedule:
        problem = setup.problem(eps)
        h = max(setup.mesh.hx, setup.mesh.hy)
        if h > eps / 2:
            log.warning("mesh size %.3g under-resolves eps=%.3g (h > eps/2)", h, eps)
        state = None
        for delta in deltas:
            t0 = time.perf_counter()

            def report(s, eps=eps, t0=t0):
                if verbose:
                    r = s.history[-1]
                    lam = " ".join(f"{v:.6g}" for v in r.eigenvalues)
                    print(f"eps={eps:g} it={r.iter} J={r.J:.8g} lambda=[{lam}] gE={r.glandau:.6g} "
                          f"C={r.compliance:.6g} step={r.step:.3g} gn={r.gradnorm:.3e} "
                          f"t={time.perf_counter() - t0:.1f}s", flush=True)

            opt = Optimizer(problem, setup.mean, setup.options(delta), setup.fixed, report)
            try:
                state = opt.run(phi)
            except Exception as exc:
                last = getattr(exc, "last_state", None)
                if out_dir is not None and last is not None:
                    tag = f"{cfg.run['name']}_eps{eps:g}_failed"
                    write_history(last.history, Path(out_dir) / f"{tag}_history.csv", problem.spec.n_eigen)
                    write_field(last.phi, setup.mesh, Path(out_dir) / f"{tag}_field")
                raise
            phi = state.phi
        rec = RunRecord(eps, state.history, phi, state.status, state=state)
        records.append(rec)
        if out_dir is not None:
            tag = f"{cfg.run['name']}_eps{eps:g}"
            write_history(rec.rows, Path(out_dir) / f"{tag}_history.csv", problem.spec.n_eigen)
            write_field(phi, setup.mesh, Path(out_dir) / f"{tag}_field")
    if out_dir is not None:
        write_table(summary_rows(cfg, records), Path(out_dir) / f"{cfg.run['name']}_table.csv",
                    summary_columns(cfg))
    return records


def summary_columns(cfg: RunConfig) -> list[str]:
    idx = cfg.objective["indices"]
    if cfg.objective["compliance_weight"]:
        return ["alpha", "compliance", "lambda_1"]
    if len(cfg.schedule) > 1 or len(idx) <= 1:
        return ["epsilon", "gamma_E", "lambda_1"]
    return ["alpha", "lambda_1", "lambda_2"]


def summary_rows(cfg: RunConfig, records: list[RunRecord]) -> list[dict]:
    w = cfg.objective["weights"]
    out = []
    for rec in records:
        r = rec.final
        lam = list(r.eigenvalues) + [float("nan")] * 2
        row = {"epsilon": rec.eps, "gamma_E": r.glandau, "lambda_1": lam[0], "lambda_2": lam[1],
               "compliance": r.compliance}
        if cfg.objective["compliance_weight"]:
            row["alpha"] = -w[0] if w else 0.0
        elif len(w) > 1:
            row["alpha"] = -w[1]
        out.append(row)
    return out


def diagnose(cfg: RunConfig, phi) -> dict:
    """Sharp-interface diagnostics of a field at the last eps of the schedule."""
    from . import diagnostics as dg

    setup = Setup(cfg)
    eps = cfg.schedule[-1]
    problem = setup.problem(eps)
    phi = np.asarray(phi, dtype=float)
    scalar = phi.ndim == 1
    sigma = dg.SIGMA_SCALAR if scalar else dg.transition_constant(n_phases=phi.shape[1]).sigma
    out = {"epsilon": eps}
    ev = problem.evaluate(phi, check=False)
    for i, v in enumerate(ev.eigenvalues):
        out[f"lambda_{problem.spec.indices[i]}"] = float(v)
    out["gamma_E"] = ev.glandau
    out["compliance"] = ev.compliance
    out["gamma_limit"] = dg.gamma_limit_check(phi, setup.asm, eps, sigma)
    out["equipartition"] = dg.equipartition_residual(phi, setup.asm, eps)
    pure = out["gamma_E"] <= 1e-14
    if (scalar or phi.shape[1] == 2) and not pure:
        try:
            r = dg.gmv_residual(phi, problem, ev.spectrum, sigma, u=ev.displacement, exclude=setup.fixed)
            out["gmv_rms"] = r.normalized
            out["gmv_theta"] = r.theta
        except ValueError as exc:
            # interface too close to the boundary for the material-side samples
            log.warning("sharp-interface residual unavailable: %s", exc)
            out["gmv_rms"] = out["gmv_theta"] = float("nan")
    else:
        out["gmv_rms"] = 0.0
        out["gmv_theta"] = 0.0
    grad = problem.gradient(phi, ev).total
    mult = dg.recover_multipliers(phi, grad, setup.asm.lumped)
    out["kkt_residual"] = mult.residual
    out["complementarity"] = mult.complementarity
    if not scalar and phi.shape[1] == 3:
        out["junctions"] = len(dg.triple_junction_angles(phi, setup.mesh))
    return out


# ---------------------------------------------------------------------------
# command line

def _out_dir(args, cfg: RunConfig | None) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get("SPECOPT_OUT")
    if env:
        return Path(env)
    return Path(cfg.run["output"] if cfg is not None else "specopt_out")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specopt", description="Phase-field eigenvalue topology optimisation")
    p.add_argument("--out", help="output directory (overrides SPECOPT_OUT and the config)")
    p.add_argument("--seed", type=int, help="start-vector seed of the eigensolver")
    p.add_argument("--threads", type=int, help="threads for the linear algebra backends")
    p.add_argument("-q", "--quiet", action="store_true", help="no per-iteration lines")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="optimise a configuration")
    r.add_argument("config")
    c = sub.add_parser("continue", help="optimise starting from a saved field")
    c.add_argument("config")
    c.add_argument("--from", dest="field", required=True)
    d = sub.add_parser("diagnose", help="sharp-interface diagnostics of a saved field")
    d.add_argument("field")
    d.add_argument("config")
    s = sub.add_parser("preset", help="run a benchmark preset")
    s.add_argument("name", choices=PRESETS)
    s.add_argument("--alpha", type=float, help="eigenvalue weight (beam_lam12, beam_compliance)")
    s.add_argument("--gamma", type=float, help="override the perimeter weight")
    s.add_argument("--from", dest="field", help="initial field CSV")
    return p


def _set_threads(n: int | None):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be positive")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def run_cli(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .eigensolver import EigenSolveError

    try:
        _set_threads(args.threads)
        if args.command == "preset":
            cfg = preset_config(args.name, args.alpha, args.gamma)
        elif args.command in ("run", "continue", "diagnose"):
            try:
                text = Path(args.config).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
            cfg = parse_config(text)
        if args.seed is not None:
            cfg = cfg.with_overrides(run={"seed": args.seed})
        out = _out_dir(args, cfg)
        setup_mesh = build_mesh(cfg)
        phi0 = None
        field_path = getattr(args, "field", None)
        if field_path:
            try:
                phi0 = read_field(field_path, setup_mesh)
            except (OSError, ValueError) as exc:
                raise ConfigError(str(exc)) from exc
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "diagnose":
            res = diagnose(cfg, phi0)
            write_table([res], out / f"{cfg.run['name']}_diagnostics.csv", list(res))
            print(" ".join(f"{k}={v:.6g}" for k, v in res.items()))
            return EXIT_OK
        records = run_config(cfg, phi0, out, verbose=not args.quiet)
    except (EigenSolveError, FloatingPointError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for rec in records:
        r = rec.final
        print(f"eps={rec.eps:g} status={rec.status} iterations={r.iter} J={r.J:.8g} "
              f"lambda={[round(v, 8) for v in r.eigenvalues]} gamma_E={r.glandau:.6g} compliance={r.compliance:.6g}")
    return EXIT_OK


def main():
    sys.exit(run_cli())
