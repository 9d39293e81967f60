import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from scipy.stats import norm

from hrflow.cli import main
from hrflow.sampler import write_samples_csv

TINY_TRAIN = {"iterations": 40, "batch_size": 64, "log_every": 10, "embed_dim": 4, "space_width": 4,
              "hidden_dims": [8], "dataset_size": 0}


def _config(tmp_path, name="cfg.yaml", **kw):
    d = {"schema_version": 1, "name": "t", "fixture": "1n-2n", "seed": 0, "out": str(tmp_path / "run"),
         "train": dict(TINY_TRAIN)}
    for key, value in kw.items():
        if isinstance(value, dict) and isinstance(d.get(key), dict):
            d[key].update(value)
        else:
            d[key] = value
    path = tmp_path / name
    path.write_text(yaml.safe_dump(d))
    return str(path)


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture
def trained(tmp_path):
    cfg = _config(tmp_path)
    assert main(["train", "--config", cfg]) == 0
    return cfg, tmp_path / "run"


# -- train ---------------------------------------------------------------------

def test_train_outputs(trained):
    cfg, out = trained
    assert (out / "checkpoint.json").exists()
    assert len(_rows(out / "losses.csv")) == 1 + 40 // 10
    m = _manifest(out)
    assert m["command"] == "train" and m["seed"] == 0 and len(m["config_hash"]) == 64


def test_manifest_lists_every_file(trained):
    cfg, out = trained
    assert main(["sample", "--config", cfg, "--n", "10", "--record"]) == 0
    listed = {a["path"] for a in _manifest(out)["artifacts"]}
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()}
    assert listed == on_disk


def test_train_is_byte_identical(tmp_path):
    cfg = _config(tmp_path)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/checkpoint.json").read_bytes() == (tmp_path / "b/checkpoint.json").read_bytes()


def test_seed_override_changes_checkpoint(tmp_path):
    cfg = _config(tmp_path)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "s1"), "--seed", "1"]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "s2"), "--seed", "2"]) == 0
    assert (tmp_path / "s1/checkpoint.json").read_bytes() != (tmp_path / "s2/checkpoint.json").read_bytes()
    assert _manifest(tmp_path / "s2")["seed"] == 2


def test_missing_target_exit_2(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"schema_version": 1, "name": "x",
                                    "source": {"kind": "standard_gaussian", "dim": 1}}))
    assert main(["train", "--config", str(path)]) == 2
    assert "target" in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path):
    assert main(["train", "--config", _config(tmp_path, bogus=1)]) == 2


def test_argument_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["train"]) == 2
    assert main(["fly", "--config", "x"]) == 2


def test_divergence_exit_3(tmp_path):
    data = tmp_path / "data.csv"
    write_samples_csv(data, np.full((4, 1), 1e200))
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"schema_version": 1, "name": "x", "out": str(tmp_path / "run"),
                                    "source": {"kind": "standard_gaussian", "dim": 1},
                                    "dataset_path": str(data), "train": dict(TINY_TRAIN)}))
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(path)]) == 3


# -- sample / eval -------------------------------------------------------------

def test_sample_rows_and_nfe(trained):
    cfg, out = trained
    assert main(["sample", "--config", cfg, "--n", "1000", "--schedule", "5,20"]) == 0
    assert len(_rows(out / "samples.csv")) == 1 + 1000
    assert _manifest(out)["nfe"] == 100


def test_sample_trajectories_have_j_plus_one_points(trained):
    cfg, out = trained
    assert main(["sample", "--config", cfg, "--n", "3", "--schedule", "5,2", "--record"]) == 0
    rows = _rows(out / "trajectories.csv")[1:]
    assert len(rows) == 3 * 6
    assert sorted({int(r[1]) for r in rows}) == list(range(6))


def test_sample_depth_mismatch_exit_2(trained):
    cfg, _ = trained
    assert main(["sample", "--config", cfg, "--n", "5", "--schedule", "100"]) == 2


def test_sample_without_checkpoint_exit_2(tmp_path):
    assert main(["sample", "--config", _config(tmp_path)]) == 2


def test_depth1_checkpoint_samples_like_classic_rf(tmp_path):
    cfg = _config(tmp_path, train={"depth": 1}, sample={"schedule": "100"})
    assert main(["train", "--config", cfg]) == 0
    assert main(["sample", "--config", cfg, "--n", "50"]) == 0
    from hrflow import nn
    from hrflow.model import HrfModel
    from hrflow.cli import _SAMPLE, _rng
    from hrflow.sampler import read_samples_csv
    model, _ = HrfModel.load(tmp_path / "run/checkpoint.json")
    x = _rng(0, _SAMPLE).standard_normal((50, 1))
    for j in range(100):
        x = x + 0.01 * nn.forward(model.params, [x], [j * 0.01])
    np.testing.assert_array_equal(read_samples_csv(tmp_path / "run/samples.csv"), x)


def test_eval_self_distance_noise_floor(tmp_path):
    from hrflow.fixtures import fixture
    _, target = fixture("1n-2n")
    samples = tmp_path / "s.csv"
    write_samples_csv(samples, target.sample(100_000, np.random.default_rng(77)))
    cfg = _config(tmp_path)
    assert main(["eval", "--config", cfg, "--samples", str(samples)]) == 0
    (row,) = _rows(tmp_path / "run/metrics.csv")[1:]
    assert row[0] == "w1" and float(row[1]) <= 0.01


def test_eval_is_byte_identical(tmp_path, trained):
    cfg, out = trained
    assert main(["sample", "--config", cfg, "--n", "200"]) == 0
    assert main(["eval", "--config", cfg]) == 0
    first = (out / "metrics.csv").read_bytes()
    assert main(["sample", "--config", cfg, "--n", "200"]) == 0
    assert main(["eval", "--config", cfg]) == 0
    assert (out / "metrics.csv").read_bytes() == first


def test_eval_empty_samples_exit_2(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("z0\n")
    assert main(["eval", "--config", _config(tmp_path), "--samples", str(empty)]) == 2


def test_eval_dim_mismatch_exit_2(tmp_path):
    samples = tmp_path / "s.csv"
    write_samples_csv(samples, np.zeros((10, 2)))
    assert main(["eval", "--config", _config(tmp_path), "--samples", str(samples)]) == 2


# -- density -------------------------------------------------------------------

def test_density_outputs(trained):
    cfg, out = trained
    cfg2 = _config(out.parent, "d.yaml", density={"n_points": 5})
    assert main(["density", "--config", cfg2]) == 0
    assert len(_rows(out / "density.csv")) == 1 + 5
    (summary,) = _rows(out / "density_summary.csv")[1:]
    assert summary[0] == "alg3-t0" and np.isfinite(float(summary[3]))


def test_density_alg4_t1_exit_2(trained):
    _, out = trained
    cfg = _config(out.parent, "d.yaml", density={"estimator": "alg4", "t": 1.0})
    assert main(["density", "--config", cfg]) == 2


def test_density_alg4_near_one_warns(trained, capsys):
    _, out = trained
    cfg = _config(out.parent, "d.yaml", density={"estimator": "alg4", "t": 0.99, "n_points": 2, "n_rho": 5})
    assert main(["density", "--config", cfg]) == 0
    assert "close to 1" in capsys.readouterr().err
    assert _manifest(out)["warnings"]


def test_density_depth1_exit_2(tmp_path):
    cfg = _config(tmp_path, train={"depth": 1})
    assert main(["train", "--config", cfg]) == 0
    assert main(["density", "--config", cfg]) == 2


# -- velocity check ------------------------------------------------------------

def test_velocity_check_blocks(tmp_path):
    cfg = _config(tmp_path, velocity_check={"n_samples": 20_000})
    assert main(["velocity-check", "--config", cfg]) == 0
    out = tmp_path / "run"
    l1 = _rows(out / "velocity_l1.csv")[1:]
    assert len(l1) == 4 and {r[0] for r in l1} == {"0", "1", "2", "3"}
    curves = _rows(out / "velocity_curves.csv")
    header, body = curves[0], curves[1:]
    assert {r[0] for r in body} == {"0", "1", "2", "3"}
    # at t = 1 the velocity law is the source reflected and shifted: N(v; x_t, 1),
    # reported as the bin-averaged density on 240 bins over [-6, 6]
    last = np.array([[float(r[header.index("v")]), float(r[header.index("analytic_pdf")])]
                     for r in body if r[0] == "3"])
    w = 12 / 240
    expected = (norm.cdf(last[:, 0] + w / 2, 1.0, 1.0) - norm.cdf(last[:, 0] - w / 2, 1.0, 1.0)) / w
    np.testing.assert_allclose(last[:, 1], expected, rtol=1e-8)
    np.testing.assert_allclose(last[:, 1], norm.pdf(last[:, 0], 1.0, 1.0), rtol=0, atol=1e-3)


def test_velocity_check_needs_gaussian_source(tmp_path):
    cfg = _config(tmp_path, fixture="8n-moons")
    assert main(["velocity-check", "--config", cfg]) == 2


# -- ablate --------------------------------------------------------------------

def test_ablate_single_model(tmp_path):
    cfg = _config(tmp_path, ablate={"n_models": 1, "n_eval_repeats": 1, "n_eval": 200})
    assert main(["ablate", "--config", cfg]) == 0
    rows = _rows(tmp_path / "run/ablation.csv")
    assert rows[0] == ["schedule", "nfe", "metric", "mean", "std", "n_models", "n_eval_repeats"]
    assert [r[0] for r in rows[1:]] == ["(1,100)", "(2,50)", "(5,20)", "(10,10)", "(20,5)", "(50,2)", "(100,1)"]
    assert all(r[4] == "" and r[1] == "100" for r in rows[1:])
    assert (tmp_path / "run/run_0/checkpoint.json").exists()


def test_ablate_std_with_two_models(tmp_path):
    cfg = _config(tmp_path, ablate={"n_models": 2, "n_eval_repeats": 1, "n_eval": 100,
                                    "schedules": ["5,20", "100,1"]})
    assert main(["ablate", "--config", cfg, "--jobs", "2"]) == 0
    rows = _rows(tmp_path / "run/ablation.csv")[1:]
    assert len(rows) == 2 and all(float(r[4]) >= 0 for r in rows)


def test_ablate_inconsistent_nfe_exit_2(tmp_path):
    cfg = _config(tmp_path, ablate={"schedules": ["5,20", "4,20"]})
    assert main(["ablate", "--config", cfg]) == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hrflow.cli", "train"], capture_output=True)
    assert proc.returncode == 2
