"""Config-driven benchmark runner.

Subcommands: ``optimize`` (full optimization run), ``compare`` (per-element
sensitivity comparison against the exact values), ``cgm-steps`` (minimal
step counts to reach accuracy criteria along an optimization path) and
``norms`` (per-element operator-norm map).

Configs are flat ``key = value`` text files; ``--override key=value`` wins
over the file, unknown keys are errors.  Outputs are deterministic: CSV
files carry a schema comment line, floats are written with shortest
round-trip precision, and topology maps are plain P2 PGM files.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from fvtopo.linalg import factorize_spd
from fvtopo.mesh import compliance, volume
from fvtopo.optimize import OptimizerConfig, SensitivityMethod, optimize
from fvtopo.problems import build_problem
from fvtopo.selective import selective_inverse_full
from fvtopo.sensitivity import (
    CgmCase,

    complement_operator,
    norm_map,
    sensitivity_cgm,
    sensitivity_foci,
    sensitivity_hoci,
    sensitivity_naive,
    sensitivity_woodbury,
)

GUARD_LIMIT = 10000
_EXACT_METHODS = ("naive", "woodbury", "hoci")


@dataclass
class RunConfig:
    problem: str = "tie_beam_coarse"
    problem_scale: int = 2
    problem_nx: int = 300
    problem_ny: int = 100
    problem_topology: int = 1
    initial: str = "default"  # default | solid
    restart_from: str = ""  # warm start: topology.csv of a previous run
    method: str = "foci"
    eps_v: float = 1e-6
    hoci_q: int = 2
    void_mode: str = "zero"
    cgm_case: int = 2
    cgm_steps: int = 2
    cgm_preconditioner: str = "jacobi"
    er: float = 0.01
    ar_max: float = 0.02
    target_volume_fraction: float = 0.5
    filter_radius: float = 0.0
    momentum: bool = False
    patience: int = 10
    max_iterations: int = 500
    seed: int = 0  # reserved; runs are deterministic
    compare_methods: str = "foci"
    steps_cases: str = "2,3"
    steps_preconditioners: str = "none,jacobi"
    steps_max: int = 0  # 0 means the full problem dimension
    report_full_beam: bool = False


_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def parse_config(path: str | None, overrides) -> RunConfig:
    """Read key = value pairs, apply overrides, fail on unknown keys."""
    raw: dict[str, str] = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            raw[key.strip()] = value.strip()
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like key=value")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()

    known = {f.name: f.type for f in fields(RunConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig()
    for key, value in raw.items():
        current = getattr(cfg, key)
        if isinstance(current, bool):
            if value.lower() not in _BOOL_VALUES:
                raise ValueError(f"config key {key}: expected a boolean, got {value!r}")
            setattr(cfg, key, _BOOL_VALUES[value.lower()])
        elif isinstance(current, int):
            setattr(cfg, key, int(value))
        elif isinstance(current, float):
            setattr(cfg, key, float(value))
        else:
            setattr(cfg, key, value)
    return cfg


def _build(cfg: RunConfig):
    problem, x0 = build_problem(
        cfg.problem,
        scale=cfg.problem_scale,
        nx=cfg.problem_nx,
        ny=cfg.problem_ny,
        topology=cfg.problem_topology,
    )
    if cfg.initial == "solid":
        x0 = np.ones(problem.n_elements, dtype=np.int8)
    elif cfg.initial != "default":
        raise ValueError("initial must be 'default' or 'solid'")
    if cfg.restart_from:
        x0 = load_topology(cfg.restart_from, problem.n_elements)
    return problem, x0


def load_topology(path: str, n: int) -> np.ndarray:
    """Read the x column of a previously written topology.csv."""
    lines = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    header = lines[0].split(",")
    col = header.index("x")
    x = np.array([int(l.split(",")[col]) for l in lines[1:]], dtype=np.int8)
    if x.size != n:
        raise ValueError(f"topology file has {x.size} elements, problem has {n}")
    return x


def _check_guard(cfg: RunConfig, problem, allow_large: bool, needs_exact: bool):
    if needs_exact and problem.n_elements > GUARD_LIMIT and not allow_large:
        raise ValueError(
            f"problem has N = {problem.n_elements} > {GUARD_LIMIT}; exact/selective "
            "analyses are guarded, pass --allow-large to lift the limit"
        )


def _method_from(cfg: RunConfig) -> SensitivityMethod:
    return SensitivityMethod(
        name=cfg.method,
        eps_v=cfg.eps_v,
        q=cfg.hoci_q,
        void_mode=cfg.void_mode,
        cgm_case=cfg.cgm_case,
        cgm_steps=cfg.cgm_steps,
        cgm_preconditioner=cfg.cgm_preconditioner,
    )


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, schema: str, header: list[str], rows, comments=()):
    lines = [f"# schema: {schema}"]
    lines += [f"# {c}" for c in comments]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_pgm(path: Path, mesh, x):
    solid, void_level, outside = 0, 200, 255
    grid = np.full(mesh.shape, outside, dtype=int)
    grid[mesh.elem_row, mesh.elem_col] = np.where(np.asarray(x) == 1, solid, void_level)
    lines = [
        "P2",
        f"# topology map: solid={solid} void={void_level} outside={outside}",
        f"{mesh.shape[1]} {mesh.shape[0]}",
        "255",
    ]
    lines += [" ".join(str(v) for v in row) for row in grid]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommand drivers


def run_optimize(cfg: RunConfig, out: Path, allow_large: bool = False) -> dict:
    problem, x0 = _build(cfg)
    _check_guard(cfg, problem, allow_large, cfg.method in _EXACT_METHODS)
    oc = OptimizerConfig(
        er=cfg.er,
        ar_max=cfg.ar_max,
        target_volume_fraction=cfg.target_volume_fraction,
        filter_radius=cfg.filter_radius,
        momentum=cfg.momentum,
        patience=cfg.patience,
        max_iterations=cfg.max_iterations,
        method=_method_from(cfg),
    )
    state = optimize(problem, oc, x0)
    out.mkdir(parents=True, exist_ok=True)

    scale = 2.0 if cfg.report_full_beam else 1.0
    _write_csv(
        out / "history.csv",
        "fvtopo.history v1",
        ["iteration", "volume_fraction", "compliance"],
        [(it, vf, scale * c) for it, vf, c in state.history],
    )
    x_best = state.best_x if state.best_x is not None else state.x
    mesh = problem.mesh
    _write_csv(
        out / "topology.csv",
        "fvtopo.topology v1",
        ["element", "col", "row", "x"],
        [
            (e, int(mesh.elem_col[e]), int(mesh.elem_row[e]), int(x_best[e]))
            for e in range(problem.n_elements)
        ],
    )
    _write_pgm(out / "topology.pgm", mesh, x_best)

    n = problem.n_elements
    target = int(round(cfg.target_volume_fraction * n))
    vv_shrink = -min(int(round(n * cfg.er)), max(volume(x0) - target, 0))
    tv_shrink = int(round(n * (abs(vv_shrink) / n + 2 * cfg.ar_max)))
    tv_hold = int(round(n * 2 * cfg.ar_max))
    connected = problem.has_load_path(state.x) if np.any(state.x) else False
    best_c = scale * state.best_compliance if state.best_x is not None else float("nan")
    summary = {
        "problem": cfg.problem,
        "method": cfg.method,
        "n_elements": n,
        "iterations_run": state.iterations,
        "best_compliance": best_c,
        "best_iteration": state.best_iteration,
        "final_compliance": scale * state.compliance,
        "final_volume_fraction": volume(state.x) / n,
        "constraints": f"VV = {vv_shrink} | 0, TV_max = {tv_shrink} | {tv_hold}",
        "load_path_connected": connected,
        "compliance_scale": "full beam (doubled)" if cfg.report_full_beam else "design domain",
    }
    (out / "summary.txt").write_text(
        "".join(f"{k}: {_fmt(v)}\n" for k, v in summary.items()), encoding="utf-8"
    )
    return summary


def _compare_tokens(cfg: RunConfig) -> list[str]:
    return [tok.strip() for tok in cfg.compare_methods.split(",") if tok.strip()]


def _eval_method(token: str, cfg: RunConfig, problem, x, u, k, fact, s):
    """Sensitivity vector for a compare token (cgm tokens accept ':steps')."""
    name, _, steps = token.partition(":")
    if name == "foci":
        return sensitivity_foci(problem, x, u, eps_v=cfg.eps_v)
    if name == "foci_s":
        return sensitivity_foci(problem, x, u, eps_v=0.0)
    if name == "hoci":
        return sensitivity_hoci(problem, x, u, s, q=cfg.hoci_q, void_mode="zero")
    if name == "woodbury":
        return sensitivity_woodbury(problem, x, u, s)
    if name == "naive":
        return sensitivity_naive(problem, x, allow_large=True)
    if name == "cgm":
        case = CgmCase(
            case=cfg.cgm_case,
            steps=int(steps) if steps else cfg.cgm_steps,
            preconditioner=cfg.cgm_preconditioner,
        )
        return sensitivity_cgm(problem, x, u, case, k=k, fact=fact)
    raise ValueError(f"unknown compare method {token!r}")


def run_sensitivity_compare(cfg: RunConfig, out: Path, allow_large: bool = False) -> dict:
    problem, x = _build(cfg)
    _check_guard(cfg, problem, allow_large, True)
    k = problem.assemble(x)
    fact = factorize_spd(k)
    u = fact.solve(problem.f)
    s = selective_inverse_full(fact, k)
    exact = sensitivity_woodbury(problem, x, u, s)

    tokens = _compare_tokens(cfg)
    results = {tok: _eval_method(tok, cfg, problem, x, u, k, fact, s) for tok in tokens}

    # loaded connective elements have unbounded exact values; they are
    # excluded from the error figures, as are void entries
    usable = (np.asarray(x) == 1) & ~exact.masked()
    l2 = {}
    for tok, sv in results.items():
        diff = sv.alpha[usable] - exact.alpha[usable]
        l2[tok] = float(np.linalg.norm(diff) / np.linalg.norm(exact.alpha[usable]))

    header = ["element", "x", "alpha_exact"]
    for tok in tokens:
        header += [f"alpha_{tok.replace(':', '_')}", f"relerr_{tok.replace(':', '_')}"]
    rows = []
    for e in range(problem.n_elements):
        row = [e, int(x[e]), exact.alpha[e]]
        for tok in tokens:
            a = results[tok].alpha[e]
            denom = abs(exact.alpha[e])
            row += [a, abs(a - exact.alpha[e]) / denom if denom > 0 else 0.0]
        rows.append(row)
    out.mkdir(parents=True, exist_ok=True)
    comments = [f"l2_error.{tok} = {_fmt(v)} (solid, unmasked elements)" for tok, v in l2.items()]
    _write_csv(out / "compare.csv", "fvtopo.compare v1", header, rows, comments)
    return l2


def _study_estimate(problem, x, u, case_id, m_pre_kind, steps, k, fact):
    case = CgmCase(case=case_id, steps=steps, preconditioner=m_pre_kind)
    return sensitivity_cgm(problem, x, u, case, k=k, fact=fact, force_generic=True)


def run_cgm_steps_study(cfg: RunConfig, out: Path, allow_large: bool = False) -> list[dict]:
    """Minimal step counts per optimization-path topology.

    Columns hold the smallest m with: relative l2 error of the solid
    sensitivities below 10% / below 50%, and the least-sensitive solid
    element classified as by the exact analysis.  For case 2 the search
    starts at m = 0, whose estimate equals the local unpenalized one (the
    initial guess is the equilibrium state); case 3 starts at m = 1.
    """
    problem, x0 = _build(cfg)
    _check_guard(cfg, problem, allow_large, True)
    oc = OptimizerConfig(
        er=cfg.er,
        ar_max=cfg.ar_max,
        target_volume_fraction=cfg.target_volume_fraction,
        filter_radius=cfg.filter_radius,
        momentum=cfg.momentum,
        patience=cfg.patience,
        max_iterations=cfg.max_iterations,
        method=_method_from(cfg),
    )
    topologies: list[np.ndarray] = []
    optimize(problem, oc, x0, on_iteration=lambda st: topologies.append(st.x.copy()))

    cases = [int(c) for c in cfg.steps_cases.split(",") if c.strip()]
    preconds = [p.strip() for p in cfg.steps_preconditioners.split(",") if p.strip()]
    m_cap = cfg.steps_max if cfg.steps_max > 0 else problem.n_dofs
    records = []
    for it, x in enumerate(topologies):
        k = problem.assemble(x)
        fact = factorize_spd(k)
        u = fact.solve(problem.f)
        s = selective_inverse_full(fact, k)
        exact = sensitivity_woodbury(problem, x, u, s)
        solid = (x == 1) & ~exact.masked()
        if not solid.any():
            continue
        a_ex = exact.alpha[solid]
        ref = np.linalg.norm(a_ex)
        argmin_ex = int(np.argmin(np.abs(a_ex)))
        for case_id in cases:
            for pre in preconds:
                found = {"l2_10": None, "l2_50": None, "classify": None}
                start = 0 if case_id == 2 else 1
                for m in range(start, m_cap + 1):
                    if m == 0:
                        est = sensitivity_foci(problem, x, u, eps_v=1.0)
                    else:
                        est = _study_estimate(problem, x, u, case_id, pre, m, k, fact)
                    a = est.alpha[solid]
                    err = np.linalg.norm(a - a_ex) / ref
                    if found["l2_10"] is None and err < 0.10:
                        found["l2_10"] = m
                    if found["l2_50"] is None and err < 0.50:
                        found["l2_50"] = m
                    if found["classify"] is None and int(np.argmin(np.abs(a))) == argmin_ex:
                        found["classify"] = m
                    if all(v is not None for v in found.values()):
                        break
                records.append(
                    {
                        "iteration": it,
                        "case": case_id,
                        "preconditioner": pre,
                        "m_l2_below_10": -1 if found["l2_10"] is None else found["l2_10"],
                        "m_l2_below_50": -1 if found["l2_50"] is None else found["l2_50"],
                        "m_lowest_solid_classified": -1
                        if found["classify"] is None
                        else found["classify"],
                    }
                )
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "steps.csv",
        "fvtopo.cgm-steps v1",
        [
            "iteration",
            "case",
            "preconditioner",
            "m_l2_below_10",
            "m_l2_below_50",
            "m_lowest_solid_classified",
        ],
        [[r[c] for c in (
            "iteration", "case", "preconditioner",
            "m_l2_below_10", "m_l2_below_50", "m_lowest_solid_classified",
        )] for r in records],
        comments=[
            "m counts conjugate-gradient steps; case 2 column value 0 means the",
            "initial guess (local unpenalized estimate) already meets the criterion;",
            "-1 means the criterion was not met within the step cap",
        ],
    )
    return records


def run_norm_study(cfg: RunConfig, out: Path, allow_large: bool = False) -> dict:
    problem, x = _build(cfg)
    _check_guard(cfg, problem, allow_large, True)
    k = problem.assemble(x)
    fact = factorize_spd(k)
    s = selective_inverse_full(fact, k)
    norms = norm_map(problem, x, s)
    with_b = cfg.problem == "appendix_b_4x4"
    u = np.zeros(problem.n_dofs)
    rows = []
    mesh = problem.mesh
    for e in range(problem.n_elements):
        row = [e, int(mesh.elem_col[e]), int(mesh.elem_row[e]), int(x[e]), norms[e]]
        if with_b:
            row.append(complement_operator(problem, e, x, u).norm if x[e] == 0 else "")
        rows.append(row)
    header = ["element", "col", "row", "x", "norm_a"] + (["norm_b_void"] if with_b else [])
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "norms.csv",
        "fvtopo.norms v1",
        header,
        rows,
        comments=[f"mean_norm_a = {_fmt(float(norms.mean()))}"],
    )
    return {"mean": float(norms.mean()), "norms": norms}


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fvtopo", description="discrete topology-optimization benchmarks"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("optimize", "compare", "cgm-steps", "norms"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (repeatable)",
        )
        p.add_argument(
            "--allow-large",
            action="store_true",
            help="lift the N guard on exact/selective analyses",
        )
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config, args.override)
        out = Path(args.out)
        if args.command == "optimize":
            summary = run_optimize(cfg, out, args.allow_large)
            for key, value in summary.items():
                print(f"{key}: {value}")
        elif args.command == "compare":
            l2 = run_sensitivity_compare(cfg, out, args.allow_large)
            for tok, v in l2.items():
                print(f"l2_error.{tok} = {v}")
        elif args.command == "cgm-steps":
            records = run_cgm_steps_study(cfg, out, args.allow_large)
            print(f"wrote {len(records)} study rows")
        else:
            res = run_norm_study(cfg, out, args.allow_large)
            print(f"mean_norm_a = {res['mean']}")
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
