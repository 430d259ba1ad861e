"""Configuration-driven command line: validate, flow, functionals, transform.

One JSON config file drives every subcommand; CSV time series and JSON
reports are the only outputs.  Exit codes: 0 success, 2 validation failure,
3 runtime flow failure, 4 config parse error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import flow as flow_mod
from .errors import (ConfigError, ConvexityLoss, NotBarycentred, NotDelzant,
                     StabilityAbort, TamingFailure, TorifanoError)
from .functionals import mabuchi_energy
from .geometry import DeformationPair, gen_scalar_curvature, matrix_identity_suite
from .polytope import (Label, PRESETS, build_polytope, build_quadrature, futaki,
                       normalization_constant)
from .potential import (InteriorGrid, SymplecticPotential, bump_smooth,
                        legendre_solve, polynomial_smooth, sum_smooth,
                        zero_smooth, _pd_mask)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_FLOW = 3
EXIT_CONFIG = 4


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def _expect(cond: bool, field: str, message: str) -> None:
    if not cond:
        raise ConfigError(field, message)


def parse_labels(spec, path: str) -> list[Label]:
    _expect(isinstance(spec, list) and spec, path, "must be a nonempty list of labels")
    labels = []
    for k, item in enumerate(spec):
        base = f"{path}[{k}]"
        _expect(isinstance(item, dict), base, "must be an object")
        normal = item.get("normal")
        _expect(isinstance(normal, list) and normal, f"{base}.normal",
                "must be a nonempty integer vector")
        for c in normal:
            _expect(isinstance(c, int) or (isinstance(c, float) and float(c).is_integer()),
                    f"{base}.normal", f"entry {c!r} is not an integer")
        offset = item.get("offset", 1.0)
        _expect(isinstance(offset, (int, float)), f"{base}.offset", "must be a number")
        try:
            labels.append(Label(tuple(int(c) for c in normal), float(offset)))
        except ValueError as exc:
            raise ConfigError(f"{base}.normal", str(exc)) from None
    return labels


def parse_polytope(doc: dict):
    spec = doc.get("polytope", "cp1")
    fano = bool(doc.get("fano_mode", True))
    if isinstance(spec, str):
        _expect(spec in PRESETS, "polytope", f"unknown preset {spec!r}")
        labels = [Label(n, off) for n, off in PRESETS[spec]]
    elif isinstance(spec, dict):
        labels = parse_labels(spec.get("labels"), "polytope.labels")
        fano = bool(spec.get("fano_mode", fano))
    else:
        raise ConfigError("polytope", "must be a preset name or an object with labels")
    return labels, fano


def parse_skew(spec, m: int, path: str) -> np.ndarray:
    if spec is None or spec == "zero":
        return np.zeros((m, m))
    if isinstance(spec, dict):
        key = "beta" if "beta" in spec else "alpha" if "alpha" in spec else None
        _expect(key is not None, path, "named form needs an 'alpha' or 'beta' entry")
        val = spec[key]
        _expect(isinstance(val, (int, float)), f"{path}.{key}", "must be a number")
        _expect(m >= 2 or val == 0, path, "skew matrices vanish identically for m=1")
        M = np.zeros((m, m))
        if m >= 2:
            M[0, 1], M[1, 0] = float(val), -float(val)
        return M
    if isinstance(spec, list):
        M = np.array(spec, dtype=float)
        _expect(M.shape == (m, m), path, f"must be a {m}x{m} matrix")
        _expect(bool(np.array_equal(M, -M.T)), path, "must be exactly skew-symmetric")
        return M
    raise ConfigError(path, "must be 'zero', a named form, or a matrix")


def parse_initial_potential(spec, m: int):
    if spec is None or spec == "zero":
        return zero_smooth(m)
    if isinstance(spec, dict):
        parts = []
        for key, body in spec.items():
            if key == "polynomial":
                _expect(isinstance(body, dict), "initial_potential.polynomial",
                        "must map exponent tuples to coefficients")
                coeffs = {}
                for expo, coef in body.items():
                    try:
                        tup = tuple(int(s) for s in str(expo).split(","))
                    except ValueError:
                        raise ConfigError("initial_potential.polynomial",
                                          f"bad exponent key {expo!r}") from None
                    _expect(len(tup) == m, "initial_potential.polynomial",
                            f"exponent {expo!r} has wrong length")
                    coeffs[tup] = float(coef)
                parts.append(polynomial_smooth(coeffs, m))
            elif key == "bump":
                _expect(isinstance(body, dict), "initial_potential.bump", "must be an object")
                centre = body.get("center", [0.0] * m)
                _expect(isinstance(centre, list) and len(centre) == m,
                        "initial_potential.bump.center", f"must be a length-{m} vector")
                amp = body.get("amplitude", 0.1)
                width = body.get("width", 0.5)
                _expect(isinstance(amp, (int, float)), "initial_potential.bump.amplitude",
                        "must be a number")
                _expect(isinstance(width, (int, float)) and width > 0,
                        "initial_potential.bump.width", "must be positive")
                parts.append(bump_smooth(centre, float(amp), float(width), m))
            else:
                raise ConfigError(f"initial_potential.{key}", "unknown initial potential kind")
        return sum_smooth(parts, m) if len(parts) != 1 else parts[0]
    raise ConfigError("initial_potential", "must be 'zero' or an object")


def parse_flow_config(doc: dict, resolution: int) -> tuple[flow_mod.FlowConfig, float | None]:
    body = doc.get("flow", {})
    _expect(isinstance(body, dict), "flow", "must be an object")
    known = {"t_end", "dt", "scheme", "normalization", "observable_cadence",
             "safeguard", "snapshot_cadence", "quad_resolution", "quad_grading"}
    for key in body:
        _expect(key in known, f"flow.{key}", "unknown flow option")
    quad = doc.get("quadrature", {})
    _expect(isinstance(quad, dict), "quadrature", "must be an object")
    try:
        cfg = flow_mod.FlowConfig(
            t_end=float(body.get("t_end", 1.0)),
            dt=body.get("dt", "auto"),
            scheme=body.get("scheme", "heun"),
            resolution=resolution,
            normalization=body.get("normalization", "affine-at-barycenter"),
            observable_cadence=float(body.get("observable_cadence", 0.05)),
            safeguard=float(body.get("safeguard", 1e3)),
            quad_resolution=body.get("quad_resolution", quad.get("resolution")),
            quad_grading=float(body.get("quad_grading", quad.get("grading", 5.0))),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError("flow", str(exc)) from None
    snap = body.get("snapshot_cadence", 1.0)
    if snap is not None:
        _expect(isinstance(snap, (int, float)) and snap > 0, "flow.snapshot_cadence",
                "must be positive or null")
        snap = float(snap)
    return cfg, snap


class Setup:
    """Everything the subcommands need, parsed and built from one config."""

    def __init__(self, doc: dict, args):
        _expect(isinstance(doc, dict), "<root>", "config must be a JSON object")
        if args.preset:
            _expect(args.preset in PRESETS, "polytope", f"unknown preset {args.preset!r}")
            doc = dict(doc)
            doc["polytope"] = args.preset
        labels, fano = parse_polytope(doc)
        try:
            self.polytope = build_polytope(labels, fano_mode=fano)
        except TorifanoError:
            raise
        m = self.polytope.dim
        res = doc.get("resolution", 101)
        if args.resolution:
            res = args.resolution
        _expect(isinstance(res, int) and res >= 8, "resolution", "must be an integer >= 8")
        self.resolution = res
        deform = doc.get("deformation", {})
        _expect(isinstance(deform, dict), "deformation", "must be an object")
        A = parse_skew(deform.get("A"), m, "deformation.A")
        B = parse_skew(deform.get("B"), m, "deformation.B")
        self.deformation = DeformationPair(A, B)
        self.smooth_fn = parse_initial_potential(doc.get("initial_potential"), m)
        self.flow_config, self.snapshot_cadence = parse_flow_config(doc, res)
        if args.t_end is not None:
            self.flow_config = flow_mod.FlowConfig(
                **{**self.flow_config.__dict__, "t_end": args.t_end})
        quad = doc.get("quadrature", {})
        self.quad_resolution = quad.get("resolution", min(128, max(64, res)))
        _expect(isinstance(self.quad_resolution, int) and self.quad_resolution >= 8,
                "quadrature.resolution", "must be an integer >= 8")
        self.quad_grading = float(quad.get("grading", 5.0))
        self.transform_y = doc.get("transform", {}).get("y")
        self.seed = args.seed
        out = args.out or doc.get("output")
        self.out_dir = Path(out) if out else None
        self.doc = doc

    def grid_potential(self) -> SymplecticPotential:
        grid = InteriorGrid(self.polytope, self.resolution, margin=self.flow_config.margin)
        return SymplecticPotential.from_smooth(self.polytope, grid, self.smooth_fn)

    def analytic_potential(self) -> SymplecticPotential:
        return SymplecticPotential.analytic(self.polytope, self.smooth_fn)

    def quadrature(self):
        return build_quadrature(self.polytope, self.quad_resolution, self.quad_grading)

    def resolved_config(self) -> dict:
        return {
            "polytope": {"labels": [{"normal": list(l.normal), "offset": l.offset}
                                    for l in self.polytope.labels],
                         "fano_mode": self.polytope.barycentred},
            "resolution": self.resolution,
            "deformation": {"A": self.deformation.A.tolist(),
                            "B": self.deformation.B.tolist()},
            "initial_potential": self.doc.get("initial_potential", "zero"),
            "flow": {k: getattr(self.flow_config, k) for k in
                     ("t_end", "dt", "scheme", "normalization",
                      "observable_cadence", "safeguard")},
            "quadrature": {"resolution": self.quad_resolution, "grading": self.quad_grading},
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _taming_spectrum(G: np.ndarray, B: np.ndarray):
    """Min/max eigenvalue of Hess(u) + iB over a stack, with arg-min index."""
    m = G.shape[-1]
    if m == 1:
        eigs_min = eigs_max = G[..., 0, 0]
    else:
        a, d, c = G[..., 0, 0], G[..., 1, 1], G[..., 0, 1]
        b = B[0, 1]
        half = 0.5 * (a + d)
        rad = np.sqrt((0.5 * (a - d)) ** 2 + c * c + b * b)
        eigs_min, eigs_max = half - rad, half + rad
    k = int(np.argmin(eigs_min))
    return float(eigs_min[k]), float(np.max(eigs_max)), k


def cmd_validate(setup: Setup) -> int:
    checks: list[tuple[str, bool, str]] = []
    pot = setup.grid_potential()
    grid = pot.grid
    G = pot.hessian_nodes()
    pd = _pd_mask(G)
    lam_min, lam_max, k = _taming_spectrum(G, np.zeros_like(setup.deformation.B))
    checks.append(("delzant", True,
                   f"{len(setup.polytope.vertices)} vertices, barycentred={setup.polytope.barycentred}"))
    checks.append(("convexity", bool(np.all(pd)),
                   f"min eig Hess(u) = {lam_min:.6g}, max = {lam_max:.6g}"))
    tmin, tmax, k = _taming_spectrum(G, setup.deformation.B)
    where = tuple(round(float(c), 6) for c in grid.unmasked_points[k])
    checks.append(("taming", tmin > 0,
                   f"min eig (Hess u + iB) = {tmin:.6g} at node {where}, max = {tmax:.6g}"))
    rng = np.random.default_rng(setup.seed)
    pick = rng.choice(len(G), size=min(10, len(G)), replace=False)
    worst = 0.0
    for idx in pick:
        worst = max(worst, matrix_identity_suite(G[idx] + setup.deformation.A))
    checks.append(("matrix-identities", worst < 1e-10,
                   f"max residual {worst:.3e} over {len(pick)} random nodes"))
    ok_all = True
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        ok_all &= ok
    return EXIT_OK if ok_all else EXIT_VALIDATION


def cmd_functionals(setup: Setup) -> int:
    Q = setup.quadrature()
    pot = setup.grid_potential()
    B = setup.deformation.B
    report = mabuchi_energy(pot, B, SymplecticPotential.analytic(setup.polytope), Q)
    kappa = gen_scalar_curvature(pot, B, pot.grid)
    core = pot.grid.core_mask
    kvals = kappa[core]
    a = normalization_constant(setup.polytope, Q)
    m = setup.polytope.dim
    fut_coords = [futaki(setup.polytope, Q, lambda X, i=i: np.atleast_2d(X)[:, i])
                  for i in range(m)]
    doc = {
        "mabuchi": report.mabuchi,
        "futaki_of_u": report.futaki_of_u,
        "entropy_term": report.entropy_term,
        "reference_entropy": report.reference_entropy,
        "a": a,
        "kappa": {"min": float(np.min(kvals)), "max": float(np.max(kvals)),
                  "mean": float(np.mean(kvals))},
        "futaki_coordinates": fut_coords,
        "config": setup.resolved_config(),
    }
    print(f"mabuchi            = {report.mabuchi:.12g}")
    print(f"futaki(u)          = {report.futaki_of_u:.12g}")
    print(f"entropy term       = {report.entropy_term:.12g}")
    print(f"reference entropy  = {report.reference_entropy:.12g}")
    print(f"a                  = {a:.12g}")
    print(f"kappa range        = [{doc['kappa']['min']:.6g}, {doc['kappa']['max']:.6g}]")
    for i, val in enumerate(fut_coords):
        print(f"futaki(x_{i + 1})        = {val:.6g}")
    if setup.out_dir:
        setup.out_dir.mkdir(parents=True, exist_ok=True)
        (setup.out_dir / "functionals.json").write_text(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_flow(setup: Setup, resume: str | None = None) -> int:
    out = setup.out_dir or Path("torifano-out")
    out.mkdir(parents=True, exist_ok=True)
    cfg = setup.flow_config
    if resume:
        state = flow_mod.load_snapshot(resume)
    else:
        state = flow_mod.initial_state(setup.polytope, cfg, setup.smooth_fn,
                                       setup.deformation)
    summary: dict = {"config": setup.resolved_config(), "scheme": cfg.scheme}
    started = time.perf_counter()
    try:
        result = flow_mod.run(state, cfg, out_dir=out,
                              snapshot_cadence=setup.snapshot_cadence)
    except (StabilityAbort, ConvexityLoss, TamingFailure) as exc:
        summary.update({
            "status": "error",
            "error": type(exc).__name__,
            "message": str(exc),
            "failing_t": getattr(exc, "t", None),
            "wall_time_s": time.perf_counter() - started,
        })
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True))
        print(f"flow failed: {exc}", file=sys.stderr)
        return EXIT_FLOW
    series = result.series
    (out / "observables.csv").write_text(series.to_csv())
    mab = series.column("mabuchi")
    slack = 1e-6 * (1.0 + np.abs(mab[:-1])) if len(mab) > 1 else np.zeros(0)
    monotone = bool(np.all(np.diff(mab) <= slack))
    summary.update({
        "status": "ok",
        "t_end": series.records[-1].t,
        "final_mabuchi": series.records[-1].mabuchi,
        "final_rhs_sup": series.records[-1].rhs_sup,
        "final_sup_b_sq": series.records[-1].sup_b_sq,
        "monotone": monotone,
        "records": len(series.records),
        "snapshots": [p.name for p in result.snapshot_paths],
        "wall_time_s": time.perf_counter() - started,
    })
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True))
    print(f"flow finished at t={series.records[-1].t:.6g}: "
          f"mabuchi={series.records[-1].mabuchi:.9g} monotone={monotone} "
          f"rhs_sup={series.records[-1].rhs_sup:.3e}")
    return EXIT_OK


def cmd_transform(setup: Setup, y_arg: str | None = None) -> int:
    if y_arg:
        ys = [[float(c) for c in part.split(",")] for part in y_arg.split(";") if part]
    else:
        ys = setup.transform_y
    _expect(isinstance(ys, list) and ys, "transform.y",
            "supply dual points via config transform.y or --y")
    m = setup.polytope.dim
    for k, y in enumerate(ys):
        _expect(isinstance(y, list) and len(y) == m, f"transform.y[{k}]",
                f"must be a length-{m} vector")
    pot = setup.analytic_potential()
    rows = []
    for y in ys:
        lp = legendre_solve(pot, np.array(y, dtype=float))
        rows.append({"y": list(map(float, lp.y)), "x": list(map(float, lp.x)),
                     "phi": lp.phi, "hess_phi": lp.hess_phi.tolist()})
        print(f"y={tuple(lp.y)} -> x={tuple(round(float(c), 12) for c in lp.x)} "
              f"phi={lp.phi:.12g}")
    if setup.out_dir:
        setup.out_dir.mkdir(parents=True, exist_ok=True)
        (setup.out_dir / "transform.json").write_text(json.dumps(rows, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="torifano",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("validate", "flow", "functionals", "transform"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--resolution", type=int, default=None)
        p.add_argument("--t-end", dest="t_end", type=float, default=None)
        p.add_argument("--preset", type=str, default=None,
                       help="polytope preset overriding the config")
        if name == "flow":
            p.add_argument("--resume", type=str, default=None,
                           help="snapshot file to restart from")
        if name == "transform":
            p.add_argument("--y", type=str, default=None,
                           help="semicolon-separated dual points, e.g. '1,0;0,1'")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = {}
        if args.config is not None:
            try:
                doc = json.loads(Path(args.config).read_text())
            except FileNotFoundError:
                raise ConfigError("<config>", f"no such file: {args.config}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError("<config>", f"invalid JSON: {exc}") from None
        setup = Setup(doc, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NotDelzant, NotBarycentred, TorifanoError) as exc:
        print(f"validation error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    try:
        if args.command == "validate":
            return cmd_validate(setup)
        if args.command == "functionals":
            return cmd_functionals(setup)
        if args.command == "flow":
            return cmd_flow(setup, resume=args.resume)
        if args.command == "transform":
            return cmd_transform(setup, y_arg=args.y)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TamingFailure, ConvexityLoss, NotBarycentred, NotDelzant) as exc:
        extra = ""
        if isinstance(exc, TamingFailure) and exc.point is not None:
            extra = f" at {tuple(round(float(c), 6) for c in np.atleast_1d(exc.point))}"
        print(f"validation error ({type(exc).__name__}): {exc}{extra}", file=sys.stderr)
        return EXIT_VALIDATION
    except StabilityAbort as exc:
        print(f"flow error: {exc}", file=sys.stderr)
        return EXIT_FLOW
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
