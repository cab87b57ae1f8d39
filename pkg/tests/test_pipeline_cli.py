"""End-to-end orchestration and command-line behavior at tiny scale."""

import hashlib
import json
import os

import numpy as np
import pytest

from facediff import cli, headmodel, synthdata
from facediff.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK
from facediff.diffusion import DiffusionModel
from facediff.pipeline import (
    ConfigError,
    NetTrainConfig,
    RankTrainConfig,
    RunConfig,
    cmd_evaluate,
    cmd_reconstruct,
    cmd_synth_data,
    cmd_train,
    derive_rng,
    write_rank_report,
)


def tiny_config(out_dir, seed=11):
    return RunConfig(
        out_dir=str(out_dir), seed=seed, n_samples=4, step_count=5,
        assets=headmodel.SynthAssetConfig(n_vertices=60, n_shape=12, n_expr=6,
                                          n_joints=3, seed=3),
        data=synthdata.SynthConfig(n_identities=8, samples_per_identity=3,
                                   shape_dim=12, expr_dim=6, embed_dim=16,
                                   occlusion_rate=0.5, seed=5),
        idgen=NetTrainConfig(steps=25, batch=8, lr=1e-3, channels=(4, 8),
                             T=40, time_dim=8, heads=2),
        expgen=NetTrainConfig(steps=25, batch=8, lr=1e-3, channels=(4, 8),
                              T=40, time_dim=8, heads=2),
        idrank=RankTrainConfig(steps=12, lr=1e-3, widths=(8, 1), n_candidates=4,
                               resample_every=4, sample_steps=5),
    )


def run_all_commands(config):
    cmd_synth_data(config)
    cmd_train("idgen", config)
    cmd_train("expgen", config)
    cmd_train("idrank", config)
    cmd_reconstruct(config)
    write_rank_report(config, "model")
    cmd_evaluate("now_style", config)
    cmd_evaluate("co545_style", config)


def tree_hashes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            p = os.path.join(dirpath, name)
            with open(p, "rb") as f:
                out[os.path.relpath(p, root)] = hashlib.sha256(f.read()).hexdigest()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    config = tiny_config(tmp_path_factory.mktemp("ws") / "out")
    run_all_commands(config)
    return config


# -- config handling ----------------------------------------------------------


def test_config_round_trip_through_json(tmp_path, workspace):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(workspace.to_dict()))
    loaded = RunConfig.from_json(str(path))
    assert loaded == RunConfig(**{**workspace.__dict__})


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus_key": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"idgen": {"nope": 2}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"data": {"occlusion_rate": 3.0}})


def test_derive_rng_is_stable_and_distinct():
    a = derive_rng(7, "train-idgen").integers(0, 2 ** 31, 4)
    b = derive_rng(7, "train-idgen").integers(0, 2 ** 31, 4)
    c = derive_rng(7, "train-expgen").integers(0, 2 ** 31, 4)
    d = derive_rng(8, "train-idgen").integers(0, 2 ** 31, 4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


# -- pipeline artifacts -------------------------------------------------------


def test_workspace_writes_expected_files(workspace):
    c = workspace
    for p in (c.assets_path, os.path.join(c.dataset_dir, "manifest.json"),
              c.ckpt_path("idgen"), c.ckpt_path("expgen"), c.ckpt_path("idrank"),
              c.path("idgen_metrics.csv"), c.path("rank_report_model.csv"),
              c.path("reports", "now_style.json"), c.path("reports", "co545_style.csv"),
              c.path("run_config.json")):
        assert os.path.exists(p), p


def test_reconstruction_outputs_share_selected_shape(workspace):
    c = workspace
    rec_dir = c.path("reconstructions", "val0000")
    with open(os.path.join(rec_dir, "coefficients.json")) as f:
        sidecar = json.load(f)
    assets = headmodel.load_assets(c.assets_path)
    beta = np.asarray(sidecar["selected_beta"])
    assert beta.shape == (c.data.shape_dim,)
    assert 0 <= sidecar["selected_index"] < c.n_samples
    assert len(sidecar["scores"]) == c.n_samples
    assert len(sidecar["expressions"]) == c.n_samples
    # every exported expression mesh rebuilds from the one selected beta
    for k, psi in enumerate(sidecar["expressions"]):
        want = headmodel.reconstruct(assets, beta, np.zeros(assets.pose_dim),
                                     np.asarray(psi)[: assets.n_expr])
        verts = []
        with open(os.path.join(rec_dir, f"expr{k:03d}.obj")) as f:
            for line in f:
                if line.startswith("v "):
                    verts.append([float(x) for x in line.split()[1:]])
        assert np.allclose(np.array(verts), want.vertices, atol=1e-8)


def test_rank_report_columns(workspace):
    import csv
    with open(workspace.path("rank_report_model.csv")) as f:
        rows = list(csv.DictReader(f))
    n_val = 2 * workspace.data.samples_per_identity
    assert len(rows) == n_val
    for r in rows:
        assert float(r["ideal_distance"]) <= float(r["selected_distance"]) + 1e-12
        assert float(r["ideal_distance"]) <= float(r["mean_distance"]) + 1e-12


def test_evaluate_report_contents(workspace):
    with open(workspace.path("reports", "now_style.json")) as f:
        report = json.load(f)
    assert report["protocol"] == "neutral_benchmark"
    assert report["overall"]["count"] == 6
    assert report["overall"]["median"] >= 0.0
    with open(workspace.path("reports", "co545_style.json")) as f:
        occ = json.load(f)
    assert occ["protocol"] == "occlusion_masked_rmse"


def test_idrank_training_leaves_idgen_checkpoint_unchanged(workspace, tmp_path):
    # the generator is frozen while the ranker trains; its checkpoint must be
    # reproducible from scratch with the same seed
    fresh = tiny_config(tmp_path / "fresh", seed=workspace.seed)
    cmd_synth_data(fresh)
    cmd_train("idgen", fresh)
    with open(fresh.ckpt_path("idgen"), "rb") as f1, open(workspace.ckpt_path("idgen"), "rb") as f2:
        assert f1.read() == f2.read()


def test_train_requires_workspace(tmp_path):
    c = tiny_config(tmp_path / "empty")
    with pytest.raises(ConfigError):
        cmd_train("idgen", c)


def test_idrank_requires_idgen(tmp_path):
    c = tiny_config(tmp_path / "norank")
    cmd_synth_data(c)
    with pytest.raises(ConfigError):
        cmd_train("idrank", c)


def test_evaluate_requires_reconstructions(tmp_path):
    c = tiny_config(tmp_path / "noeval")
    cmd_synth_data(c)
    with pytest.raises(ConfigError):
        cmd_evaluate("now_style", c)


# -- whole-pipeline determinism -----------------------------------------------


def test_pipeline_outputs_are_byte_identical_across_reruns(tmp_path):
    import shutil
    c = tiny_config(tmp_path / "det")
    run_all_commands(c)
    first = tree_hashes(c.out_dir)
    shutil.rmtree(c.out_dir)
    run_all_commands(c)
    assert tree_hashes(c.out_dir) == first


# -- CLI ----------------------------------------------------------------------


def _write_config(path, config):
    with open(path, "w") as f:
        json.dump(config.to_dict(), f)
    return str(path)


def test_cli_export_mesh(tmp_path, workspace):
    cfg_path = _write_config(tmp_path / "c.json", workspace)
    coeffs = tmp_path / "coeffs.json"
    coeffs.write_text(json.dumps({"beta": [0.5] * workspace.data.shape_dim}))
    out = tmp_path / "mesh.obj"
    rc = cli.main(["--config", cfg_path, "export-mesh", str(out),
                   "--coeffs", str(coeffs)])
    assert rc == EXIT_OK
    assert out.read_text().startswith("v ")


def test_cli_flag_overrides(tmp_path, workspace):
    cfg_path = _write_config(tmp_path / "c.json", workspace)
    ns = cli.build_parser().parse_args(
        ["--config", cfg_path, "--seed", "99", "--out", "/tmp/x",
         "--n-samples", "7", "--steps", "3", "synth-data"])
    merged = cli.load_config(ns)
    assert merged.seed == 99
    assert merged.out_dir == "/tmp/x"
    assert merged.n_samples == 7
    assert merged.step_count == 3


def test_cli_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"bogus": 1}')
    assert cli.main(["--config", str(bad), "synth-data"]) == EXIT_CONFIG
    assert cli.main(["--config", str(tmp_path / "missing.json"), "synth-data"]) == EXIT_CONFIG


def test_cli_numerical_abort_exits_3(tmp_path, workspace):
    import shutil
    c = tiny_config(tmp_path / "nan")
    shutil.copytree(workspace.out_dir, c.out_dir)
    # poison the generator checkpoint so sampling hits non-finite state
    model = DiffusionModel.load(c.ckpt_path("idgen"))
    model.net.head.bias.data[:] = np.inf
    model.save(c.ckpt_path("idgen"))
    cfg_path = _write_config(tmp_path / "c.json", c)
    assert cli.main(["--config", cfg_path, "reconstruct"]) == EXIT_NUMERICAL


def test_cli_reconstruct_subset_and_rank_report(tmp_path, workspace):
    import shutil
    c = tiny_config(tmp_path / "sub")
    shutil.copytree(workspace.out_dir, c.out_dir)
    shutil.rmtree(c.path("reconstructions"))
    cfg_path = _write_config(tmp_path / "c.json", c)
    assert cli.main(["--config", cfg_path, "reconstruct", "--inputs", "0", "2"]) == EXIT_OK
    recs = sorted(os.listdir(c.path("reconstructions")))
    assert [d for d in recs if d.startswith("val")] == ["val0000", "val0001"]
    assert cli.main(["--config", cfg_path, "rank-report", "--pool", "mixed",
                     "--max-inputs", "2"]) == EXIT_OK
    assert os.path.exists(c.path("rank_report_mixed.csv"))
    assert cli.main(["--config", cfg_path, "baseline-flame", "--max-inputs", "2"]) == EXIT_OK
    assert os.path.exists(c.path("baseline_flame.csv"))
