"""Command line entry point: ``compdesign <command>``.

Every command writes into ``--out`` (a run directory) together with a
``manifest.json`` holding the resolved config, its digest, ``git describe``
and start/finish timestamps. ``--config`` points at an INI file whose
sections are named after the config classes (``SimConfig``, ``TrainConfig``,
``SamplerConfig``, ...) with keys named exactly as their fields.
"""
from __future__ import annotations

import ast
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import click
import numpy as np

from .baselines import (BackpropConfig, CemConfig, SurrogateModel, SurrogateTrainConfig, backprop_design,
                        cem_design, default_backbone, train_surrogate)
from .compose import DesignObjective, SamplerConfig, build_plan, design
from .denoiser import DenoiserConfig
from .desk import ensure_desk
from .designfile import read_design, write_design
from .diffusion import DiffusionModel, TrainConfig, extract_windows, train
from .evaluation import (DesignReport, RunRecord, emit_table, emit_trajectory_plot, evaluate_batch,
                         random_method, scenario_name, sweep)
from .numerics import load_checkpoint
from .sim import SimConfig, generate_dataset, read_dataset, simulate_batch

log = logging.getLogger("compdesign")

CONFIG_CLASSES = {cls.__name__: cls for cls in (SimConfig, DenoiserConfig, TrainConfig, SurrogateTrainConfig,
                                                SamplerConfig, CemConfig, BackpropConfig, DesignObjective)}
SEEDED = ("SimConfig", "DenoiserConfig", "TrainConfig", "SurrogateTrainConfig", "SamplerConfig",
          "CemConfig", "BackpropConfig")


class ConfigError(click.ClickException):
    pass


def _parse_value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def read_config(path) -> dict[str, dict]:
    """INI file -> ``{section: {field: value}}`` with values parsed as Python literals."""
    cp = configparser.ConfigParser()
    cp.optionxform = str            # keep field-name case
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    out = {}
    for section in cp.sections():
        if section not in CONFIG_CLASSES:
            raise ConfigError(f"unknown config section [{section}]; expected one of {sorted(CONFIG_CLASSES)}")
        fields = {f.name for f in dataclasses.fields(CONFIG_CLASSES[section])}
        vals = {}
        for key, raw in cp.items(section):
            if key not in fields:
                raise ConfigError(f"[{section}] has no field {key!r}; fields are {sorted(fields)}")
            vals[key] = _parse_value(raw)
        out[section] = vals
    return out


class Run:
    """Resolved configs plus the run directory bookkeeping."""

    def __init__(self, out: Path, seed: int | None, sections: dict[str, dict]):
        self.out = out
        self.seed = seed
        self.sections = sections
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.resolved: dict[str, dict] = {}

    def config(self, name: str, **overrides):
        cls = CONFIG_CLASSES[name]
        vals = dict(self.sections.get(name, {}))
        if self.seed is not None and name in SEEDED:
            vals["seed"] = self.seed
        vals.update({k: v for k, v in overrides.items() if v is not None})
        for f in dataclasses.fields(cls):
            if f.name in vals and isinstance(vals[f.name], list):
                vals[f.name] = tuple(vals[f.name])
        try:
            obj = cls(**vals)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [{name}]: {exc}") from exc
        self.resolved[name] = _jsonable(dataclasses.asdict(obj))
        return obj

    def write_manifest(self, command: str, extra: dict | None = None) -> Path:
        blob = json.dumps(self.resolved, sort_keys=True).encode()
        manifest = {"command": command, "argv": sys.argv[1:], "config": self.resolved,
                    "config_digest": hashlib.sha256(blob).hexdigest(), "git_describe": git_describe(),
                    "started": self.started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
        manifest.update(extra or {})
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _jsonable(d):
    return json.loads(json.dumps(d, default=list))


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=10)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _load_model(path):
    kind = load_checkpoint(path)["meta"].get("kind")
    if kind == "diffusion":
        return DiffusionModel.load(path)
    if kind == "surrogate":
        return SurrogateModel.load(path)
    raise click.ClickException(f"{path}: unknown checkpoint kind {kind!r}")


@click.group()
@click.option("--seed", type=int, default=None, help="Seed applied to every config section.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="INI file with sections named after the config classes.")
@click.option("--out", type=click.Path(file_okay=False), default="runs/latest", show_default=True,
              help="Run directory for all artifacts.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, seed, config_path, out, verbose):
    """Compositional inverse design of N-body trajectories with diffusion models."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    sections = read_config(config_path) if config_path else {}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ctx.obj = Run(out, seed, sections)


@main.command("gen-data")
@click.option("--n-sims", type=int, default=200, show_default=True)
@click.option("--n-bodies", type=int, default=None)
@click.pass_obj
def gen_data(run: Run, n_sims, n_bodies):
    """Simulate random trajectories into a dataset file."""
    cfg = run.config("SimConfig", n_bodies=n_bodies)
    summary = generate_dataset(cfg, n_sims, run.out / "dataset.bin")
    run.write_manifest("gen-data", {"dataset": str(summary.path), "shape": list(summary.shape)})
    click.echo(f"wrote {summary.path} {tuple(summary.shape)}")


@main.command("train-diffusion")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--steps", type=int, default=None, help="Override TrainConfig.total_steps.")
@click.pass_obj
def train_diffusion(run: Run, data, steps):
    """Train the window denoiser on a dataset."""
    header, traj = read_dataset(data)
    dcfg = run.config("DenoiserConfig", channels=4 * header.n_bodies)
    tcfg = run.config("TrainConfig", total_steps=steps)
    windows = extract_windows(traj, dcfg.window_len)
    model = DiffusionModel(dcfg)
    res = train(model, windows, tcfg, out_dir=run.out,
                progress=lambda s, l, t: log.info("step %d loss %.4f (%.0fs)", s, l, t))
    run.write_manifest("train-diffusion", {"checkpoint": str(run.out / "last.ckpt"),
                                           "final_loss": float(np.mean(res.losses[-100:])) if res.losses else None})
    click.echo(f"wrote {run.out / 'last.ckpt'}")


@main.command("train-surrogate")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--variant", type=click.Choice(["1-step", "23-step"]), default="23-step", show_default=True)
@click.option("--steps", type=int, default=None, help="Override SurrogateTrainConfig.total_steps.")
@click.pass_obj
def train_surrogate_cmd(run: Run, data, variant, steps):
    """Train a forward surrogate for the CEM and backprop baselines."""
    header, traj = read_dataset(data)
    cfg = run.config("SurrogateTrainConfig", total_steps=steps)
    res = train_surrogate(variant, traj, cfg, default_backbone(variant, header.n_bodies), out_dir=run.out,
                          progress=lambda s, l: log.info("step %d loss %.5f", s, l))
    run.write_manifest("train-surrogate", {"checkpoint": str(run.out / "last.ckpt"), "val_mae": res.val_mae})
    click.echo(f"wrote {run.out / 'last.ckpt'} (validation MAE {res.val_mae:.5f})")


@main.command("design")
@click.option("--method", type=click.Choice(["cindm", "cem", "backprop", "random"]), default="cindm",
              show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--n-bodies", type=int, default=2, show_default=True)
@click.option("--t-total", type=int, default=24, show_default=True, help="Designed horizon in frames.")
@click.option("--t-q", type=int, default=10, show_default=True, help="Stride between composed windows.")
@click.option("--n-runs", type=int, default=100, show_default=True)
@click.pass_obj
def design_cmd(run: Run, method, checkpoint, n_bodies, t_total, t_q, n_runs):
    """Design initial states and write a design file."""
    objective = run.config("DesignObjective")
    sim = run.config("SimConfig", n_bodies=n_bodies)
    seed = run.seed or 0
    rng = np.random.default_rng([seed, n_bodies, t_total])
    plan_desc, cfg_desc = {}, {}
    if method != "random" and checkpoint is None:
        raise click.UsageError(f"--checkpoint is required for method {method}")
    traj = None
    if method == "cindm":
        model = _load_model(checkpoint)
        if not isinstance(model, DiffusionModel):
            raise click.ClickException(f"{checkpoint} is not a diffusion checkpoint")
        registry = {"pair": model}
        sampler = run.config("SamplerConfig")
        plan = build_plan(n_bodies, t_total, model.window_len, t_q, registry)
        res = design(plan, objective, sampler, registry, n=n_runs, rng=rng)
        gamma, traj = res.gamma, res.trajectory
        plan_desc, cfg_desc = plan.describe(), dataclasses.asdict(sampler)
    elif method in ("cem", "backprop"):
        model = _load_model(checkpoint)
        if not isinstance(model, SurrogateModel) or model.n_bodies != n_bodies:
            raise click.ClickException(f"{checkpoint} is not a {n_bodies}-body surrogate")
        if method == "cem":
            cfg = run.config("CemConfig", radius=sim.radius)
            gamma = np.stack([cem_design(model, objective, cfg, t_total, rng=rng).gamma for _ in range(n_runs)])
        else:
            cfg = run.config("BackpropConfig", radius=sim.radius)
            init = random_method(sim)(n_bodies, t_total, n_runs, rng)[0]
            gamma = backprop_design(model, objective, cfg, t_total, init).gamma
        traj = model.rollout(gamma, t_total)
        cfg_desc = dataclasses.asdict(cfg)
        cfg_desc["variant"] = model.variant
    else:
        gamma = random_method(sim)(n_bodies, t_total, n_runs, rng)[0]
    path = write_design(run.out / f"design-{method}.bin", method, gamma, traj, seed, plan_desc,
                        _jsonable(cfg_desc))
    run.write_manifest("design", {"design": str(path)})
    click.echo(f"wrote {path} ({n_runs} designs, {n_bodies} bodies, {t_total} frames)")


def read_records(path) -> list[RunRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RunRecord(row["method"], int(row["n_bodies"]), int(row["T_total"]), int(row["run"]),
                                 int(row["seed"]), float(row["design_obj"]), float(row["mae"]),
                                 float(row["projection"]), row["failed"] == "True"))
    return out


@main.command("evaluate")
@click.option("--design", "designs", type=click.Path(exists=True, dir_okay=False), multiple=True, required=True)
@click.option("--label", default=None, help="Method label in the records (default: the file's method tag).")
@click.option("--t-total", type=int, default=None, help="Horizon for design files without a trajectory.")
@click.pass_obj
def evaluate_cmd(run: Run, designs, label, t_total):
    """Re-simulate design files with the solver and write per-run records."""
    objective = run.config("DesignObjective")
    report = DesignReport()
    for path in designs:
        d = read_design(path)
        h = d.header
        sim = run.config("SimConfig", n_bodies=h["n_bodies"])
        T = h["T_total"] or t_total
        if T is None:
            raise click.ClickException(f"{path} has no trajectory; pass --t-total")
        for i, e in enumerate(evaluate_batch(d.gamma, d.trajectory, sim, objective, T)):
            report.records.append(RunRecord(label or d.method, h["n_bodies"], T, i, h["seed"], e.design_obj,
                                            e.mae, e.projection, e.failed))
    report.write_records(run.out / "records.csv")
    for a in report.aggregates():
        click.echo(f"{a.method:>12} {a.scenario}: design_obj {a.design_obj:.4f} ± {a.design_obj_ci:.4f}  "
                   f"MAE {a.mae:.5f} ± {a.mae_ci:.5f}  (n={a.n}, failed={a.n_failed})")
    run.write_manifest("evaluate", {"records": str(run.out / "records.csv")})


@main.command("table")
@click.option("--records", type=click.Path(exists=True, dir_okay=False), multiple=True, required=True)
@click.option("--name", default="table", show_default=True)
@click.pass_obj
def table_cmd(run: Run, records, name):
    """Aggregate record files into CSV and Markdown tables."""
    report = DesignReport([r for p in records for r in read_records(p)])
    paths = emit_table(report, run.out / name)
    run.write_manifest("table", {"tables": [str(p) for p in paths]})
    click.echo(paths[-1].read_text())


@main.command("plot")
@click.option("--design", "design_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--index", type=int, default=0, show_default=True)
@click.pass_obj
def plot_cmd(run: Run, design_path, index):
    """Render one designed trajectory next to its solver rollout as SVG."""
    d = read_design(design_path)
    if d.trajectory is None:
        raise click.ClickException("design file has no trajectory to plot")
    sim = run.config("SimConfig", n_bodies=d.header["n_bodies"])
    objective = run.config("DesignObjective")
    solver = simulate_batch(d.gamma[index:index + 1], d.trajectory.shape[1], sim)[0]
    out = emit_trajectory_plot(d.trajectory[index], solver, objective.target,
                               run.out / f"trajectory-{d.method}-{index}.svg", radius=sim.radius)
    run.write_manifest("plot", {"plot": str(out)})
    click.echo(f"wrote {out}")


@main.command("sweep")
@click.option("--kind", type=click.Choice(["lambda", "steps", "batch-size"]), required=True)
@click.option("--grid", required=True, help="Comma separated values, e.g. 0.001,0.01,0.1,0.4,1,10.")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--n-bodies", type=int, default=2, show_default=True)
@click.option("--t-total", type=int, default=24, show_default=True)
@click.option("--n-runs", type=int, default=100, show_default=True)
@click.option("--n-batches", type=int, default=10, show_default=True)
@click.pass_obj
def sweep_cmd(run: Run, kind, grid, checkpoint, n_bodies, t_total, n_runs, n_batches):
    """Sweep the guidance weight, sampling steps or best-of-B batch size."""
    values = [float(v) if kind == "lambda" else int(v) for v in grid.split(",")]
    registry = {"pair": _load_model(checkpoint)}
    res = sweep(kind, values, registry, run.config("SamplerConfig"), n_bodies, t_total, n_runs,
                run.seed or 0, n_batches, run.config("SimConfig", n_bodies=n_bodies),
                run.config("DesignObjective"))
    rows = res.summary()
    with open(run.out / f"sweep-{kind}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    if kind != "batch-size":
        emit_table(res.report, run.out / f"sweep-{kind}-table")
    res.report.write_records(run.out / "records.csv")
    run.write_manifest("sweep", {"scenario": scenario_name(n_bodies, t_total)})
    for r in rows:
        click.echo("  ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))


@main.command("desk")
@click.option("--root", type=click.Path(file_okay=False), default=".desk", show_default=True)
@click.option("--no-train", is_flag=True, help="Only report; fail if artifacts are missing.")
@click.pass_obj
def desk_cmd(run: Run, root, no_train):
    """Build (or locate) the reduced-scale checkpoints used by the acceptance suite."""
    try:
        art = ensure_desk(root, train_missing=not no_train)
    except FileNotFoundError as exc:
        raise click.ClickException(str(exc))
    run.write_manifest("desk", {"root": str(art.root)})
    click.echo(f"diffusion {art.diffusion}")
    for variant, path in art.surrogates.items():
        click.echo(f"surrogate {variant} {path}")


if __name__ == "__main__":
    main()
