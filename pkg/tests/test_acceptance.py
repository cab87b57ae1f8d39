"""Acceptance gate: nine go/no-go checks at stated tolerances.

Each test prints a single machine-readable pass/fail line. The end-to-end
trend checks (criteria 6 and 7) train the full pipeline once at desk scale in
a shared fixture; everything else runs in seconds. Run with `-rP` (the repo
default) or `-s` to see the criterion lines for passing tests.
"""

import hashlib
import json
import os
import shutil
import time

import numpy as np
import pytest

from facediff import cli, headmodel, synthdata
from facediff.diffusion import DiffusionConfig, DiffusionModel, NoiseSchedule, forward_diffuse, train_diffusion
from facediff.gradcore import Tensor, concat, conv1d, layer_norm, repeat2, softmax
from facediff.pipeline import (
    NetTrainConfig,
    RankTrainConfig,
    RunConfig,
    _frontal_from_beta,
    _split_samples,
    cmd_synth_data,
    cmd_train,
    derive_rng,
    load_workspace,
)
from facediff.ranknet import RankNet, gt_distribution, rank_loss, select, vertex_distance

from fd import check_grad, numeric_grad


def _report(num, desc, ok, detail):
    line = f"criterion {num} ({desc}): {'PASS' if ok else 'FAIL'} [{detail}]"
    print(line)
    assert ok, line


# -- criterion 1: gradient suite ----------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.time()
    r = np.random.default_rng(42)

    def shapes(n=20, nd_max=3):
        for _ in range(n):
            nd = int(r.integers(1, nd_max + 1))
            yield tuple(int(r.integers(1, 5)) for _ in range(nd))

    for s in shapes():
        a, b = r.standard_normal(s), r.standard_normal(s)
        check_grad(lambda x, y: x + y, [a, b])
        check_grad(lambda x, y: x - y, [a, b])
        check_grad(lambda x, y: x * y, [a, b])
        check_grad(lambda x, y: x / (y * y + 1.0), [a, b])
    for s in shapes():
        a = r.standard_normal(s)
        check_grad(lambda x: -x, [a])
        check_grad(lambda x: x ** 3, [a])
        check_grad(lambda x: x.exp(), [a])
        check_grad(lambda x: (x * x + 0.1).log(), [a])
        check_grad(lambda x: (x * x + 0.1).sqrt(), [a])
        check_grad(lambda x: x.tanh(), [a])
        check_grad(lambda x: x.gelu(), [a])
        safe = a.copy()
        safe[np.abs(safe) < 0.2] = 0.7
        check_grad(lambda x: x.abs(), [safe])
    for s in shapes(20, 3):
        a = r.standard_normal(s)
        ax = int(r.integers(0, len(s)))
        check_grad(lambda x: x.sum(), [a])
        check_grad(lambda x, ax=ax: x.sum(axis=ax), [a])
        check_grad(lambda x, ax=ax: x.mean(axis=ax, keepdims=True), [a])
        check_grad(lambda x: x.reshape(-1), [a])
        check_grad(lambda x, ax=ax: softmax(x, axis=ax), [a])
        check_grad(lambda x, ax=ax: repeat2(x, axis=ax), [a])
        perm = tuple(r.permutation(len(s)))
        check_grad(lambda x, perm=perm: x.transpose(perm), [a])
        idx = r.integers(0, s[0], size=3)
        check_grad(lambda x, idx=idx: x[idx], [a])
    for _ in range(20):
        m, k, n2 = (int(r.integers(1, 6)) for _ in range(3))
        check_grad(lambda x, y: x @ y, [r.standard_normal((m, k)), r.standard_normal((k, n2))])
        check_grad(lambda x, y: concat([x, y], axis=-1),
                   [r.standard_normal((m, k)), r.standard_normal((m, n2))])
    for _ in range(20):
        b_, ci, co, l = (int(r.integers(1, 5)) for _ in range(4))
        l += 4
        x = r.standard_normal((b_, ci, l))
        w = r.standard_normal((co, ci, 3))
        bias = r.standard_normal(co)
        stride = int(r.integers(1, 3))
        check_grad(lambda a_, w_, b2, stride=stride: conv1d(a_, w_, b2, stride=stride, pad=1),
                   [x, w, bias])
        d = int(r.integers(2, 7))
        check_grad(lambda a_, g_, b2: layer_norm(a_, g_, b2),
                   [r.standard_normal((3, d)), r.standard_normal(d), r.standard_normal(d)])
    elapsed = time.time() - t0
    _report(1, "finite-difference gradient suite", elapsed < 120.0,
            f"all ops at rel tol 1e-4, {elapsed:.1f}s < 120s")


# -- criterion 2: head-model suite --------------------------------------------


def test_criterion_2_head_model_suite():
    t0 = time.time()
    r = np.random.default_rng(1)
    assets = headmodel.synthesize_assets(headmodel.SynthAssetConfig(
        n_vertices=120, n_shape=20, n_expr=8, n_joints=3, seed=2,
        nonzero_pose_basis=True))
    zeros = (np.zeros(assets.n_shape), np.zeros(assets.pose_dim), np.zeros(assets.n_expr))

    bit_exact = headmodel.reconstruct(assets, *zeros).vertices.tobytes() == assets.template.tobytes()

    mesh = headmodel.Mesh(assets.template, assets.faces)
    joints = headmodel.regress_joints(assets, mesh.vertices)
    rest = headmodel.lbs(assets, mesh, joints, np.zeros(assets.pose_dim))
    lbs_identity = float(np.max(np.abs(rest.vertices - mesh.vertices)))

    theta = np.zeros(assets.pose_dim)
    theta[:3] = r.standard_normal(3)
    posed = headmodel.lbs(assets, mesh, joints, theta)
    pick = r.integers(0, assets.n_vertices, size=(200, 2))
    d0 = np.linalg.norm(mesh.vertices[pick[:, 0]] - mesh.vertices[pick[:, 1]], axis=1)
    d1 = np.linalg.norm(posed.vertices[pick[:, 0]] - posed.vertices[pick[:, 1]], axis=1)
    rigid_err = float(np.max(np.abs(d1 - d0)))

    a = r.standard_normal(assets.n_shape)
    b = r.standard_normal(assets.n_shape)
    zt, zp = np.zeros(assets.pose_dim), np.zeros(assets.n_expr)
    va = headmodel.blend_shapes(assets, a, zt, zp).vertices - assets.template
    vb = headmodel.blend_shapes(assets, b, zt, zp).vertices - assets.template
    vab = headmodel.blend_shapes(assets, a + b, zt, zp).vertices - assets.template
    super_err = float(np.max(np.abs(vab - (va + vb))) / np.max(np.abs(vab)))

    elapsed = time.time() - t0
    ok = bit_exact and lbs_identity < 1e-9 and rigid_err < 1e-9 and super_err < 1e-8 and elapsed < 30.0
    _report(2, "head-model suite", ok,
            f"bit_exact={bit_exact} lbs_id={lbs_identity:.2g} rigid={rigid_err:.2g} "
            f"superpos={super_err:.2g} {elapsed:.1f}s < 30s")


# -- criterion 3: diffusion statistics ----------------------------------------


def test_criterion_3_diffusion_statistics():
    r = np.random.default_rng(3)
    s = NoiseSchedule.linear(200)
    x0 = np.broadcast_to(np.array([3.0, -2.0, 0.5, 1.0, -1.5, 0.0]), (10000, 6))
    x_t = forward_diffuse(x0, np.full(10000, s.T), r.standard_normal((10000, 6)), s)
    mean_ok = bool(np.all(np.abs(x_t.mean(axis=0)) < 0.05))
    var = x_t.var(axis=0)
    var_ok = bool(np.all((var > 0.9) & (var < 1.1)))

    cfg = DiffusionConfig(coeff_dim=12, cond_dim=8, in_channels=4, channels=(4, 8),
                          time_dim=8, heads=2, T=40)
    m = DiffusionModel(cfg, seed=0)
    m.net.head.weight.data[:] = 0.0
    m.net.head.bias.data[:] = 0.0
    loss = m.training_step(r.standard_normal((4096, 12)), r.standard_normal((4096, 8)),
                           np.random.default_rng(5))
    want = np.sqrt(2.0 / np.pi)
    loss_ok = abs(loss - want) / want < 0.01
    _report(3, "diffusion statistics", mean_ok and var_ok and loss_ok,
            f"|mean|max={np.max(np.abs(x_t.mean(axis=0))):.3f} var=[{var.min():.3f},{var.max():.3f}] "
            f"zero-pred loss {loss:.4f} vs {want:.4f}")


# -- criterion 4: conditional-mode recovery -----------------------------------


def test_criterion_4_toy_conditional_mode_recovery():
    r = np.random.default_rng(7)
    modes = np.array([[1.0, 1.0], [-1.0, -1.0]])
    labels = r.integers(0, 2, 2048)
    x0 = modes[labels] + 0.01 * r.standard_normal((2048, 2))
    cond = np.eye(2)[labels]
    cfg = DiffusionConfig(coeff_dim=2, cond_dim=2, in_channels=1, channels=(8, 16), T=100)
    m = DiffusionModel(cfg, seed=3)
    t0 = time.time()
    train_diffusion(m, x0, cond, steps=1200, batch=128, lr=3e-3,
                    rng=np.random.default_rng(1))
    train_time = time.time() - t0
    m.freeze()
    sr = np.random.default_rng(2)
    fracs = []
    for label in (0, 1):
        draws = m.sample_batch(np.eye(2)[label], 500, sr)
        fracs.append(float(np.mean(np.linalg.norm(draws - modes[label], axis=1) < 0.3)))
    ok = min(fracs) >= 0.95 and train_time < 300.0
    _report(4, "conditional-mode recovery", ok,
            f"correct-mode fractions {fracs[0]:.3f}/{fracs[1]:.3f} >= 0.95, "
            f"train {train_time:.0f}s < 300s")


# -- criterion 5: ranking correctness -----------------------------------------


def test_criterion_5_ranking_correctness():
    r = np.random.default_rng(11)
    grad_ok = True
    for _ in range(20):
        s = r.standard_normal(7)
        g = gt_distribution(r.random(7) + 0.1)
        t = Tensor(s.copy(), requires_grad=True)
        rank_loss(t, g).backward()
        h = softmax(Tensor(s)).data
        num = numeric_grad(lambda x: rank_loss(Tensor(x), g).item(), s.copy())
        grad_ok &= bool(np.allclose(t.grad, h - g, atol=1e-10))
        grad_ok &= bool(np.allclose(t.grad, num, atol=1e-6))
    argmax_ok = all(
        np.argmax(gt_distribution(d)) == np.argmin(d)
        for d in (r.random(int(r.integers(2, 20))) * 10 for _ in range(1000))
    )
    tie_ok = select(np.array([2.0, 2.0, 2.0])) == 0
    _report(5, "ranking correctness", grad_ok and argmax_ok and tie_ok,
            f"grad=h-g (FD checked), argmax g=argmin d on 1000 vectors, tie->0")


# -- criteria 6 and 7: end-to-end trends --------------------------------------


ACCEPT_SEED = 20240817


def accept_config(out_dir):
    return RunConfig(
        out_dir=str(out_dir), seed=ACCEPT_SEED, n_samples=100, step_count=40,
        assets=headmodel.SynthAssetConfig(seed=0),
        data=synthdata.SynthConfig(n_identities=52, samples_per_identity=8,
                                   occlusion_rate=0.5, seed=ACCEPT_SEED),
        idgen=NetTrainConfig(steps=3000, batch=64, lr=3e-4, channels=(16, 32, 64), T=200),
        idrank=RankTrainConfig(steps=1500, lr=3e-4, widths=(256, 64, 1),
                               n_candidates=16, resample_every=4, sample_steps=30,
                               prior_mix=0.25),
    )


@pytest.fixture(scope="module")
def trend_stats(tmp_path_factory):
    """Train IdGen and IdRank once, score the 104-input validation split."""
    t0 = time.time()
    config = accept_config(tmp_path_factory.mktemp("accept") / "ws")
    cmd_synth_data(config)
    cmd_train("idgen", config)
    cmd_train("idrank", config)
    assets, samples, _, _, manifest = load_workspace(config)
    _, val = _split_samples(samples, manifest)
    idgen = DiffusionModel.load(config.ckpt_path("idgen"))
    idgen.freeze()
    idrank = RankNet.load(config.ckpt_path("idrank"))

    model_all, prior_all = [], []
    ranked, mean_all, min100, min10 = [], [], [], []
    mixed_wins = 0
    for j, sample in enumerate(val):
        input_id = f"val{j:04d}"
        _, gt = synthdata.make_gt_mesh(assets, sample, neutral=True)
        rng = derive_rng(config.seed, "accept-model", input_id)
        coeffs = idgen.sample_batch(sample.ca, config.n_samples, rng, config.step_count)
        cands = np.stack([_frontal_from_beta(assets, b) for b in coeffs])
        d = np.array([vertex_distance(c, gt) for c in cands])
        sel = select(idrank.score(cands, sample.condition))
        model_all.append(d)
        ranked.append(d[sel])
        mean_all.append(d.mean())
        min100.append(d.min())
        min10.append(d[:10].min())

        rng_p = derive_rng(config.seed, "accept-prior", input_id)
        prior = config.data.shape_scale * rng_p.standard_normal((config.n_samples,
                                                                config.data.shape_dim))
        pc = np.stack([_frontal_from_beta(assets, b) for b in prior])
        prior_all.append(np.array([vertex_distance(c, gt) for c in pc]))

        rng_m = derive_rng(config.seed, "accept-mixed", input_id)
        half = config.n_samples // 2
        mixed = np.concatenate([
            config.data.shape_scale * rng_m.standard_normal((half, config.data.shape_dim)),
            idgen.sample_batch(sample.ca, config.n_samples - half, rng_m, config.step_count),
        ])
        mc = np.stack([_frontal_from_beta(assets, b) for b in mixed])
        md = np.array([vertex_distance(c, gt) for c in mc])
        msel = select(idrank.score(mc, sample.condition))
        mixed_wins += md[msel] < md.mean()

    return {
        "n_val": len(val),
        "model_median": float(np.median(np.concatenate(model_all))),
        "prior_median": float(np.median(np.concatenate(prior_all))),
        "ranked_median": float(np.median(ranked)),
        "mean_median": float(np.median(mean_all)),
        "min100_median": float(np.median(min100)),
        "min10_median": float(np.median(min10)),
        "mixed_wins": int(mixed_wins),
        "elapsed": time.time() - t0,
    }


def test_criterion_6_end_to_end_trend(trend_stats):
    s = trend_stats
    a = s["model_median"] < s["prior_median"]
    b = s["ranked_median"] <= s["mean_median"]
    c = s["min100_median"] <= s["min10_median"]
    budget = s["elapsed"] < 1800.0
    ok = s["n_val"] >= 100 and a and b and c and budget
    _report(6, "end-to-end trend", ok,
            f"n={s['n_val']} (a) model {s['model_median']:.4f} < prior {s['prior_median']:.4f}: {a}; "
            f"(b) ranked {s['ranked_median']:.4f} <= avg {s['mean_median']:.4f}: {b}; "
            f"(c) min@100 {s['min100_median']:.4f} <= min@10 {s['min10_median']:.4f}: {c}; "
            f"{s['elapsed']:.0f}s < 1800s")


def test_criterion_7_mixed_pool_ranking(trend_stats):
    s = trend_stats
    frac = s["mixed_wins"] / s["n_val"]
    _report(7, "mixed-pool ranking ablation", frac >= 0.8,
            f"ranked beats pool average on {s['mixed_wins']}/{s['n_val']} inputs ({100 * frac:.0f}% >= 80%)")


# -- criterion 8: evaluation-protocol suite -----------------------------------


def test_criterion_8_evaluation_suite():
    from facediff.evalproto import (EvalReport, METRICAL, NON_METRICAL,
                                    masked_vertex_rmse)
    r = np.random.default_rng(8)
    gt = r.standard_normal((40, 3))
    pred = gt + 0.01 * r.standard_normal((40, 3))
    mask = np.ones(40, dtype=bool)
    base = masked_vertex_rmse(pred, gt, mask, METRICAL)
    q, _ = np.linalg.qr(r.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    moved = pred @ q.T + r.standard_normal(3)
    invariance = abs(masked_vertex_rmse(moved, gt, mask, METRICAL) - base)

    self_zero = masked_vertex_rmse(gt.copy(), gt, mask) == 0.0

    report = EvalReport(protocol="neutral_benchmark", alignment=NON_METRICAL,
                        errors_mm=[1.0, 3.0], labels=["a", "b"])
    analytic = (report.median, report.mean, report.std) == (2.0, 2.0, 1.0)
    ok = invariance < 1e-9 and self_zero and analytic
    _report(8, "evaluation-protocol suite", ok,
            f"rigid invariance {invariance:.2g} < 1e-9, self-eval==0: {self_zero}, "
            f"(1,3)->(2,2,1) exact: {analytic}")


# -- criterion 9: determinism -------------------------------------------------


def _tree_hashes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            p = os.path.join(dirpath, name)
            with open(p, "rb") as f:
                out[os.path.relpath(p, root)] = hashlib.sha256(f.read()).hexdigest()
    return out


def test_criterion_9_cli_determinism(tmp_path):
    out_dir = tmp_path / "ws"
    config = RunConfig(
        out_dir=str(out_dir), seed=13, n_samples=4, step_count=5,
        assets=headmodel.SynthAssetConfig(n_vertices=60, n_shape=12, n_expr=6,
                                          n_joints=3, seed=3),
        data=synthdata.SynthConfig(n_identities=8, samples_per_identity=3,
                                   shape_dim=12, expr_dim=6, embed_dim=16,
                                   occlusion_rate=0.5, seed=5),
        idgen=NetTrainConfig(steps=20, batch=8, lr=1e-3, channels=(4, 8),
                             T=40, time_dim=8, heads=2),
        expgen=NetTrainConfig(steps=20, batch=8, lr=1e-3, channels=(4, 8),
                              T=40, time_dim=8, heads=2),
        idrank=RankTrainConfig(steps=8, lr=1e-3, widths=(8, 1), n_candidates=4,
                               resample_every=4, sample_steps=5),
    )
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config.to_dict()))
    coeffs_path = tmp_path / "coeffs.json"
    coeffs_path.write_text(json.dumps({"beta": [0.3] * 12}))

    def run_everything():
        cmds = [
            ["synth-data"],
            ["train", "idgen"],
            ["train", "expgen"],
            ["train", "idrank"],
            ["reconstruct"],
            ["rank-report", "--pool", "mixed"],
            ["evaluate", "now_style"],
            ["evaluate", "co545_style"],
            ["baseline-flame"],
            ["export-mesh", str(out_dir / "one.obj"), "--coeffs", str(coeffs_path)],
        ]
        for cmd in cmds:
            rc = cli.main(["--config", str(cfg_path)] + cmd)
            assert rc == 0, f"{cmd} exited {rc}"

    run_everything()
    first = _tree_hashes(out_dir)
    shutil.rmtree(out_dir)
    run_everything()
    second = _tree_hashes(out_dir)
    ok = first == second and len(first) > 10
    _report(9, "CLI determinism", ok,
            f"{len(first)} output files byte-identical across reruns")
