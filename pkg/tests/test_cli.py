import json

import pytest
from click.testing import CliRunner

from compdesign.cli import main, read_config, read_records
from compdesign.designfile import read_design

TINY_INI = """\
[SimConfig]
n_steps_sim = 64

[DenoiserConfig]
window_len = 8
base_width = 8
depth = 2
channel_factors = (1, 2)
blocks_per_level = 1
step_embed_dim = 8
groups = 4

[TrainConfig]
batch_size = 4
log_every = 1

[SurrogateTrainConfig]
batch_size = 4

[SamplerConfig]
S = 4

[CemConfig]
population = 10
elite_frac = 0.2
iterations = 2
"""


@pytest.fixture
def ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return str(p)


def invoke(args):
    res = CliRunner().invoke(main, args, catch_exceptions=False)
    assert res.exit_code == 0, res.output
    return res.output


def test_end_to_end_commands(tmp_path, ini):
    d = tmp_path / "run"
    common = ["--seed", "3", "--config", ini]
    invoke(common + ["--out", str(d / "data"), "gen-data", "--n-sims", "3"])
    data = str(d / "data" / "dataset.bin")
    invoke(common + ["--out", str(d / "diff"), "train-diffusion", "--data", data, "--steps", "2"])
    ckpt = str(d / "diff" / "last.ckpt")
    manifest = json.loads((d / "diff" / "manifest.json").read_text())
    assert manifest["config"]["TrainConfig"]["seed"] == 3
    assert {"config_digest", "git_describe", "started", "finished"} <= set(manifest)

    invoke(common + ["--out", str(d / "des"), "design", "--method", "cindm", "--checkpoint", ckpt,
                     "--t-total", "8", "--n-runs", "2"])
    df = read_design(d / "des" / "design-cindm.bin")
    assert df.gamma.shape == (2, 2, 4) and df.trajectory.shape == (2, 8, 2, 4)
    invoke(common + ["--out", str(d / "des"), "design", "--method", "random", "--n-runs", "2"])

    out = invoke(common + ["--out", str(d / "ev"), "evaluate", "--design", str(d / "des" / "design-cindm.bin"),
                           "--design", str(d / "des" / "design-random.bin"), "--t-total", "8"])
    assert "cindm" in out and "random" in out
    recs = read_records(d / "ev" / "records.csv")
    assert len(recs) == 4

    invoke(common + ["--out", str(d / "tab"), "table", "--records", str(d / "ev" / "records.csv")])
    assert (d / "tab" / "table.md").exists() and (d / "tab" / "table.csv").exists()
    invoke(common + ["--out", str(d / "plot"), "plot", "--design", str(d / "des" / "design-cindm.bin")])
    assert (d / "plot" / "trajectory-cindm-0.svg").exists()

    invoke(common + ["--out", str(d / "sur"), "train-surrogate", "--data", data, "--variant", "1-step",
                     "--steps", "2"])
    invoke(common + ["--out", str(d / "des"), "design", "--method", "cem", "--checkpoint",
                     str(d / "sur" / "last.ckpt"), "--t-total", "8", "--n-runs", "2"])
    assert read_design(d / "des" / "design-cem.bin").trajectory.shape == (2, 8, 2, 4)

    out = invoke(common + ["--out", str(d / "sw"), "sweep", "--kind", "lambda", "--grid", "0.001,0.4",
                           "--checkpoint", ckpt, "--t-total", "8", "--n-runs", "2"])
    assert "lambda=0.001" in out
    assert (d / "sw" / "sweep-lambda.csv").exists()


def test_unknown_config_field_rejected(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[SamplerConfig]\nlambda_ = 3\n")
    res = CliRunner().invoke(main, ["--config", str(p), "--out", str(tmp_path), "gen-data"])
    assert res.exit_code != 0 and "no field" in res.output


def test_read_config_parses_literals(ini):
    cfg = read_config(ini)
    assert cfg["DenoiserConfig"]["channel_factors"] == (1, 2)
    assert cfg["SamplerConfig"]["S"] == 4


def test_design_needs_checkpoint(tmp_path):
    res = CliRunner().invoke(main, ["--out", str(tmp_path), "design", "--method", "cem"])
    assert res.exit_code != 0 and "--checkpoint" in res.output


def test_desk_without_training_reports_missing(tmp_path):
    res = CliRunner().invoke(main, ["--out", str(tmp_path / "run"), "desk", "--root", str(tmp_path / "d"),
                                    "--no-train"])
    assert res.exit_code != 0 and "desk artifacts missing" in res.output
