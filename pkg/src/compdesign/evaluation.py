"""Re-simulation scoring, experiment grids, tables, trajectory plots and sweeps.

Designs are always scored on the ground-truth solver's rollout from the
designed initial state; a method's own trajectory only enters the MAE.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .baselines import BackpropConfig, CemConfig, backprop_design, cem_design
from .compose import DesignObjective, SamplerConfig, build_plan, design
from .sim import PackingError, SimConfig, project_feasible, sample_initial_state, simulate_batch

log = logging.getLogger(__name__)

TIME_SCENARIOS = [(2, 24), (2, 34), (2, 44), (2, 54)]
BODY_SCENARIOS = [(4, 24), (4, 44), (8, 24), (8, 44)]
CI_Z = 1.96
EMPTY = "—"


class MissingCheckpoint(FileNotFoundError):
    pass


def scenario_name(n_bodies: int, T_total: int) -> str:
    return f"{n_bodies}-body {T_total} steps"


def uniform_distance_baseline(n_samples: int = 100_000, target=(0.5, 0.5),
                              rng: np.random.Generator | None = None) -> float:
    """Monte-Carlo mean distance from a uniform point in the unit square to ``target``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    p = rng.uniform(0.0, 1.0, size=(n_samples, 2))
    return float(np.linalg.norm(p - np.asarray(target), axis=1).mean())


# single-design evaluation ---------------------------------------------------------

@dataclass
class Evaluation:
    design_obj: float
    mae: float              # nan when no designed trajectory
    projection: float       # total centre displacement applied to make gamma feasible
    failed: bool = False


def evaluate(gamma: np.ndarray, designed_trajectory: np.ndarray | None, sim_config: SimConfig,
             objective: DesignObjective, T_total: int | None = None) -> Evaluation:
    """Project ``gamma [B, 4]`` to a feasible state, roll out the solver and score it.

    ``T_total`` defaults to the designed trajectory's length.
    """
    return evaluate_batch(np.asarray(gamma)[None],
                          None if designed_trajectory is None else np.asarray(designed_trajectory)[None],
                          sim_config, objective, T_total)[0]


def evaluate_batch(gammas: np.ndarray, designed: np.ndarray | None, sim_config: SimConfig,
                   objective: DesignObjective, T_total: int | None = None) -> list[Evaluation]:
    gammas = np.asarray(gammas, dtype=np.float64)
    if T_total is None:
        if designed is None:
            raise ValueError("T_total is required without a designed trajectory")
        T_total = np.asarray(designed).shape[1]
    n = len(gammas)
    feasible = np.zeros_like(gammas)
    proj = np.zeros(n)
    ok = np.ones(n, dtype=bool)
    for i, g in enumerate(gammas):
        if not np.all(np.isfinite(g)):
            ok[i] = False
            continue
        try:
            feasible[i], proj[i] = project_feasible(g, sim_config.radius)
        except PackingError:
            ok[i] = False
    if proj.max(initial=0.0) > 0:
        log.info("projected %d of %d designs (max displacement %.4g)", int((proj > 0).sum()), n, proj.max())
    solver = np.full((n, T_total) + gammas.shape[1:], np.nan)
    if ok.any():
        solver[ok] = simulate_batch(feasible[ok], T_total, sim_config)
    out = []
    for i in range(n):
        if not ok[i]:
            out.append(Evaluation(math.nan, math.nan, math.nan, failed=True))
            continue
        J = float(objective.value(solver[i, -1, :, :2]))
        mae = math.nan
        if designed is not None:
            mae = float(np.mean(np.abs(np.asarray(designed[i], dtype=np.float64) - solver[i])))
        out.append(Evaluation(J, mae, float(proj[i])))
    return out


# reports ----------------------------------------------------------------------

@dataclass
class RunRecord:
    method: str
    n_bodies: int
    T_total: int
    run: int
    seed: int
    design_obj: float
    mae: float
    projection: float = 0.0
    failed: bool = False

    @property
    def scenario(self) -> str:
        return scenario_name(self.n_bodies, self.T_total)


@dataclass
class Aggregate:
    method: str
    scenario: str
    n: int
    n_failed: int
    design_obj: float
    design_obj_ci: float
    mae: float
    mae_ci: float


def mean_ci(values) -> tuple[float, float]:
    """Mean and 95% half-width ``1.96 * std / sqrt(n)`` ignoring NaNs (NaN if empty)."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if len(v) == 0:
        return math.nan, math.nan
    ci = CI_Z * v.std(ddof=1) / math.sqrt(len(v)) if len(v) > 1 else 0.0
    return float(v.mean()), float(ci)


@dataclass
class DesignReport:
    records: list[RunRecord] = field(default_factory=list)
    skipped: list[tuple[str, str, str]] = field(default_factory=list)   # (method, scenario, reason)

    def aggregates(self) -> list[Aggregate]:
        groups: dict[tuple[str, str], list[RunRecord]] = {}
        for r in self.records:
            groups.setdefault((r.method, r.scenario), []).append(r)
        out = []
        for (method, scen), recs in groups.items():
            good = [r for r in recs if not r.failed]
            J, Jci = mean_ci([r.design_obj for r in good])
            M, Mci = mean_ci([r.mae for r in good])
            out.append(Aggregate(method, scen, len(good), len(recs) - len(good), J, Jci, M, Mci))
        return out

    def cell(self, method: str, scenario: str) -> Aggregate | None:
        for a in self.aggregates():
            if a.method == method and a.scenario == scenario:
                return a
        return None

    @property
    def methods(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def write_records(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            names = [f.name for f in RunRecord.__dataclass_fields__.values()]
            w.writerow(names)
            for r in self.records:
                w.writerow([_fmt_cell(getattr(r, k)) for k in names])


def _fmt_cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


# experiments ------------------------------------------------------------------

# A method designs ``n`` instances of a scenario: returns (gammas [n, B, 4], trajectories or None).
Method = Callable[[int, int, int, np.random.Generator], tuple]


def cindm_method(registry: Mapping, sampler: SamplerConfig, T_tr: int | None = None, t_q: int = 10,
                 objective: DesignObjective | None = None) -> Method:
    """``T_tr`` defaults to the registered model's window length."""
    objective = objective or DesignObjective()

    def run(n_bodies, T_total, n, rng):
        if not registry:
            raise MissingCheckpoint("no diffusion model loaded")
        window = T_tr or next(iter(registry.values())).window_len
        plan = build_plan(n_bodies, T_total, window, t_q, registry)
        res = design(plan, objective, sampler, registry, n=n, rng=rng)
        return res.gamma, res.trajectory
    return run


def _require_bodies(model, n_bodies):
    if model is None:
        raise MissingCheckpoint("no surrogate loaded")
    if model.n_bodies != n_bodies:
        raise MissingCheckpoint(f"surrogate is fixed to {model.n_bodies} bodies")


def cem_method(model, config: CemConfig, objective: DesignObjective | None = None,
               with_trajectory: bool = True) -> Method:
    objective = objective or DesignObjective()

    def run(n_bodies, T_total, n, rng):
        _require_bodies(model, n_bodies)
        gammas = np.stack([cem_design(model, objective, config, T_total, rng=rng).gamma for _ in range(n)])
        return gammas, (model.rollout(gammas, T_total) if with_trajectory else None)
    return run


def backprop_method(model, config: BackpropConfig, sim_config: SimConfig | None = None,
                    objective: DesignObjective | None = None, with_trajectory: bool = True) -> Method:
    objective = objective or DesignObjective()

    def run(n_bodies, T_total, n, rng):
        _require_bodies(model, n_bodies)
        sc = replace(sim_config or SimConfig(), n_bodies=n_bodies)
        init = np.stack([sample_initial_state(sc, rng) for _ in range(n)])
        gammas = backprop_design(model, objective, config, T_total, init).gamma
        return gammas, (model.rollout(gammas, T_total) if with_trajectory else None)
    return run


def random_method(sim_config: SimConfig | None = None) -> Method:
    """Uniformly random feasible initial states (the no-design reference)."""

    def run(n_bodies, T_total, n, rng):
        sc = replace(sim_config or SimConfig(), n_bodies=n_bodies)
        return np.stack([sample_initial_state(sc, rng) for _ in range(n)]), None
    return run


def cell_rng(seed: int, method: str, n_bodies: int, T_total: int) -> np.random.Generator:
    key = [seed, n_bodies, T_total] + list(method.encode())
    return np.random.default_rng(key)


def run_experiment(methods: Mapping[str, Method], scenarios: Sequence[tuple[int, int]], n_runs: int = 100,
                   seed: int = 0, sim_config: SimConfig | None = None,
                   objective: DesignObjective | None = None, progress: Callable | None = None) -> DesignReport:
    """Design and re-simulate ``n_runs`` instances per (method, scenario) cell.

    Each cell draws from its own RNG stream derived from ``(seed, method, scenario)``,
    so cells can be added or dropped without changing the others.
    """
    objective = objective or DesignObjective()
    report = DesignReport()
    for name, method in methods.items():
        for n_bodies, T_total in scenarios:
            scen = scenario_name(n_bodies, T_total)
            try:
                gammas, trajs = method(n_bodies, T_total, n_runs, cell_rng(seed, name, n_bodies, T_total))
            except MissingCheckpoint as exc:
                log.warning("skipping %s / %s: %s", name, scen, exc)
                report.skipped.append((name, scen, str(exc)))
                continue
            sc = replace(sim_config or SimConfig(), n_bodies=n_bodies)
            evals = evaluate_batch(gammas, trajs, sc, objective, T_total)
            for i, e in enumerate(evals):
                report.records.append(RunRecord(name, n_bodies, T_total, i, seed, e.design_obj, e.mae,
                                                e.projection, e.failed))
            if progress:
                progress(name, scen, report.cell(name, scen))
    return report


# tables -----------------------------------------------------------------------

CSV_FIELDS = ["method", "scenario", "n", "n_failed", "design_obj", "design_obj_ci", "mae", "mae_ci"]


def _num(v: float, digits: int) -> str:
    return EMPTY if v is None or math.isnan(v) else f"{v:.{digits}f}"


def table_csv(report: DesignReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for a in report.aggregates():
        w.writerow([a.method, a.scenario, a.n, a.n_failed] +
                   [EMPTY if math.isnan(v) else repr(v) for v in (a.design_obj, a.design_obj_ci, a.mae, a.mae_ci)])
    return buf.getvalue()


def read_table_csv(text: str) -> list[Aggregate]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        nums = [math.nan if row[k] == EMPTY else float(row[k])
                for k in ("design_obj", "design_obj_ci", "mae", "mae_ci")]
        out.append(Aggregate(row["method"], row["scenario"], int(row["n"]), int(row["n_failed"]), *nums))
    return out


def _layout_for(report: DesignReport) -> list[tuple[int, int]]:
    present = {(r.n_bodies, r.T_total) for r in report.records}
    for layout in (TIME_SCENARIOS, BODY_SCENARIOS):
        if present and present <= set(layout):
            return layout
    extra = sorted(present - set(TIME_SCENARIOS) - set(BODY_SCENARIOS))
    return [s for s in TIME_SCENARIOS + BODY_SCENARIOS if s in present] + extra


def table_markdown(report: DesignReport, scenarios: Sequence[tuple[int, int]] | None = None) -> str:
    """Method rows by scenario columns (design obj and MAE, mean ± CI); best per column in bold."""
    scenarios = list(scenarios) if scenarios is not None else _layout_for(report)
    names = [scenario_name(*s) for s in scenarios]
    methods = report.methods
    cells = {(a.method, a.scenario): a for a in report.aggregates()}
    best = {}
    for scen in names:
        for key in ("design_obj", "mae"):
            vals = [getattr(cells[(m, scen)], key) for m in methods if (m, scen) in cells]
            vals = [v for v in vals if not math.isnan(v)]
            best[(scen, key)] = min(vals) if vals else None
    head = "| Method | " + " | ".join(f"{s} design obj | {s} MAE" for s in names) + " |"
    sep = "|---|" + "---|---|" * len(names)
    lines = [head, sep]
    for m in methods:
        row = [m]
        for scen in names:
            a = cells.get((m, scen))
            for key, digits in (("design_obj", 4), ("mae", 5)):
                if a is None or math.isnan(getattr(a, key)):
                    row.append(EMPTY)
                    continue
                v, ci = getattr(a, key), getattr(a, key + "_ci")
                txt = f"{_num(v, digits)} ± {_num(ci, digits)}"
                row.append(f"**{txt}**" if best[(scen, key)] == v else txt)
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def emit_table(report: DesignReport, out, formats: Sequence[str] = ("csv", "md"),
               scenarios: Sequence[tuple[int, int]] | None = None) -> list[Path]:
    """Write ``<out>.csv`` and/or ``<out>.md``; returns the written paths."""
    if not report.records:
        raise ValueError("cannot emit a table for an empty report")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            text = table_csv(report)
        elif fmt == "md":
            text = table_markdown(report, scenarios)
        else:
            raise ValueError(f"unknown table format {fmt!r}")
        path = out.with_suffix("." + fmt)
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written


# trajectory plot --------------------------------------------------------------

BODY_COLOURS = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189),
                (255, 127, 14), (140, 86, 75), (227, 119, 194), (23, 190, 207)]


def _shade(rgb, frac: float) -> str:
    # frac 0 -> pale, 1 -> full colour
    r, g, b = (int(round(255 - (255 - c) * (0.25 + 0.75 * frac))) for c in rgb)
    return f"#{r:02x}{g:02x}{b:02x}"


def trajectory_svg(trajectory: np.ndarray, solver_trajectory: np.ndarray | None = None,
                   target=(0.5, 0.5), radius: float = 0.1, size: int = 400, every: int = 2,
                   title: str | None = None) -> str:
    """SVG of a ``[T, B, 4]`` trajectory: circles every ``every`` frames, later ones darker;
    ``+`` marks for the solver rollout at the same frames; a star at ``target``."""
    traj = np.asarray(trajectory)
    if solver_trajectory is not None and np.shape(solver_trajectory) != traj.shape:
        raise ValueError(f"trajectory {traj.shape} and solver trajectory {np.shape(solver_trajectory)} differ")
    T, B = traj.shape[:2]
    pad = 10

    def px(x):
        return pad + x * size

    def py(y):
        return pad + (1.0 - y) * size

    frames = list(range(0, T, every))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 2 * pad}" height="{size + 2 * pad}" '
             f'viewBox="0 0 {size + 2 * pad} {size + 2 * pad}">']
    if title:
        parts.append(f"<title>{escape(title)}</title>")
    parts.append(f'<rect x="{pad}" y="{pad}" width="{size}" height="{size}" fill="none" stroke="black"/>')
    for b in range(B):
        rgb = BODY_COLOURS[b % len(BODY_COLOURS)]
        for k, t in enumerate(frames):
            frac = k / max(len(frames) - 1, 1)
            x, y = traj[t, b, 0], traj[t, b, 1]
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="{radius * size:.2f}" '
                         f'fill="{_shade(rgb, frac)}" fill-opacity="0.35" stroke="{_shade(rgb, frac)}"/>')
        if solver_trajectory is not None:
            for k, t in enumerate(frames):
                frac = k / max(len(frames) - 1, 1)
                x, y = px(solver_trajectory[t, b, 0]), py(solver_trajectory[t, b, 1])
                parts.append(f'<path d="M{x - 4:.2f},{y:.2f}H{x + 4:.2f}M{x:.2f},{y - 4:.2f}V{y + 4:.2f}" '
                             f'stroke="{_shade(rgb, frac)}" class="solver"/>')
    cx, cy = px(target[0]), py(target[1])
    pts = []
    for i in range(10):
        rr = 9 if i % 2 == 0 else 4
        ang = -math.pi / 2 + i * math.pi / 5
        pts.append(f"{cx + rr * math.cos(ang):.2f},{cy + rr * math.sin(ang):.2f}")
    parts.append(f'<polygon points="{" ".join(pts)}" fill="gold" stroke="black" class="target"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_trajectory_plot(trajectory, solver_trajectory, target, out, **kw) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(trajectory_svg(trajectory, solver_trajectory, target, **kw), encoding="utf-8")
    return out


# sweeps -----------------------------------------------------------------------

@dataclass
class SweepResult:
    kind: str
    grid: list
    scenario: str
    report: DesignReport
    r_B: list | None = None

    def label(self, v) -> str:
        return f"{self.kind}={v}"

    def summary(self) -> list[dict]:
        if self.kind == "batch-size":
            return [{"B": b, "r_B": r} for b, r in zip(self.grid, self.r_B)]
        rows = []
        for v in self.grid:
            a = self.report.cell(self.label(v), self.scenario)
            row = {self.kind: v}
            if a is not None:
                row.update(design_obj=a.design_obj, design_obj_ci=a.design_obj_ci, mae=a.mae, mae_ci=a.mae_ci)
            rows.append(row)
        return rows


def best_of_batches(values: np.ndarray, sizes: Sequence[int]) -> list[float]:
    """``r_B``: mean over rows of the minimum over each row's first ``B`` entries.

    Using nested prefixes makes ``r_B`` non-increasing in ``B`` on any fixed pool.
    """
    values = np.asarray(values, dtype=np.float64)
    if max(sizes) > values.shape[1]:
        raise ValueError(f"batch size {max(sizes)} exceeds the pool width {values.shape[1]}")
    return [float(np.nanmin(values[:, :b], axis=1).mean()) for b in sizes]


def sweep(kind: str, grid: Sequence, registry: Mapping, base: SamplerConfig, n_bodies: int = 2,
          T_total: int = 24, n_runs: int = 100, seed: int = 0, n_batches: int = 10,
          sim_config: SimConfig | None = None, objective: DesignObjective | None = None,
          progress: Callable | None = None, t_q: int = 10) -> SweepResult:
    """Guidance-weight (``lambda``), sampling-step (``steps``) or best-of-B (``batch-size``) sweep."""
    objective = objective or DesignObjective()
    grid = list(grid)
    if kind in ("lambda", "steps"):
        methods = {}
        for v in grid:
            cfg = replace(base, lam=float(v)) if kind == "lambda" else replace(base, S=int(v))
            methods[f"{kind}={v}"] = cindm_method(registry, cfg, t_q=t_q, objective=objective)
        report = run_experiment(methods, [(n_bodies, T_total)], n_runs, seed, sim_config, objective, progress)
        return SweepResult(kind, grid, scenario_name(n_bodies, T_total), report)
    if kind == "batch-size":
        width = int(max(grid))
        method = cindm_method(registry, base, t_q=t_q, objective=objective)
        report = run_experiment({"pool": method}, [(n_bodies, T_total)], n_batches * width, seed,
                                sim_config, objective, progress)
        J = np.array([r.design_obj for r in report.records]).reshape(n_batches, width)
        sizes = [int(b) for b in grid]
        return SweepResult(kind, sizes, scenario_name(n_bodies, T_total), report, best_of_batches(J, sizes))
    raise ValueError(f"unknown sweep kind {kind!r}; choose lambda, steps or batch-size")
