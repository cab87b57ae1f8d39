"""End-to-end orchestration: configs, training drivers, reconstruction, evaluation.

Every command is a pure function of (config, seed, input files): sub-seeds are
derived by hashing (master seed, command name, input id), and the resolved
config is dumped into each output directory for provenance.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import evalproto, headmodel, synthdata
from .diffusion import DiffusionConfig, DiffusionModel, train_diffusion
from .ranknet import RankConfig, RankNet, fit_target_head, select, train_ranknet, vertex_distance


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""


def derive_rng(master_seed: int, command: str, input_id: str = "") -> np.random.Generator:
    """Deterministic per-command/per-input random stream."""
    digest = hashlib.sha256(f"{master_seed}:{command}:{input_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass(frozen=True)
class NetTrainConfig:
    steps: int = 2000
    batch: int = 128
    lr: float = 1e-4
    channels: tuple = (32, 64, 128)
    T: int = 1000
    time_dim: int = 128
    heads: int = 4


@dataclass(frozen=True)
class RankTrainConfig:
    steps: int = 1500
    lr: float = 3e-4
    widths: tuple = (512, 256, 64, 1)
    n_candidates: int = 16       # candidates per training iteration (desk scale)
    resample_every: int = 1
    sample_steps: int = 50       # diffusion steps when drawing training candidates
    prior_mix: float = 0.25      # fraction of training sets built half from prior draws
    ridge: float = 1.0           # regularizer for the closed-form target-head fit


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "out"
    seed: int = 0
    n_samples: int = 100         # inference-time hypotheses per input
    step_count: int | None = None  # diffusion steps at inference (None = full T)
    expr_samples: int | None = None  # defaults to n_samples
    precision: str = "f4"
    alignment: str = evalproto.NON_METRICAL
    assets: headmodel.SynthAssetConfig = field(default_factory=headmodel.SynthAssetConfig)
    data: synthdata.SynthConfig = field(default_factory=synthdata.SynthConfig)
    idgen: NetTrainConfig = field(default_factory=NetTrainConfig)
    expgen: NetTrainConfig = field(default_factory=NetTrainConfig)
    idrank: RankTrainConfig = field(default_factory=RankTrainConfig)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict):
        def build(dc, d, name):
            fields = set(dc.__dataclass_fields__)
            unknown = set(d) - fields
            if unknown:
                raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
            for k in ("channels", "widths"):
                if k in d and isinstance(d[k], list):
                    d[k] = tuple(d[k])
            try:
                return dc(**d)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid {name} config: {e}") from e

        raw = dict(raw)
        sub = {}
        for key, dc in (("assets", headmodel.SynthAssetConfig), ("data", synthdata.SynthConfig),
                        ("idgen", NetTrainConfig), ("expgen", NetTrainConfig),
                        ("idrank", RankTrainConfig)):
            if key in raw:
                sub[key] = build(dc, raw.pop(key), key)
        top = build(cls, raw, "run")
        return replace(top, **sub)

    def to_dict(self):
        d = asdict(self)
        d["idgen"]["channels"] = list(self.idgen.channels)
        d["expgen"]["channels"] = list(self.expgen.channels)
        d["idrank"]["widths"] = list(self.idrank.widths)
        return d

    # -- canonical file locations --------------------------------------------

    def path(self, *parts):
        return os.path.join(self.out_dir, *parts)

    @property
    def assets_path(self):
        return self.path("assets.bin")

    @property
    def dataset_dir(self):
        return self.path("dataset")

    def ckpt_path(self, network):
        return self.path(f"{network}.ckpt")


def dump_config(config: RunConfig, dest_dir):
    os.makedirs(dest_dir, exist_ok=True)
    with open(os.path.join(dest_dir, "run_config.json"), "w") as f:
        json.dump({"seed": config.seed, "config": config.to_dict()}, f, indent=2, sort_keys=True)


# -- data / assets ------------------------------------------------------------


def cmd_synth_data(config: RunConfig):
    """Write assets and the synthetic dataset under the output directory."""
    os.makedirs(config.out_dir, exist_ok=True)
    dump_config(config, config.out_dir)
    assets = headmodel.synthesize_assets(config.assets)
    headmodel.save_assets(config.assets_path, assets, {"seed": config.assets.seed})
    samples, enc_a, enc_f = synthdata.generate_dataset(config.data)
    synthdata.save_dataset(config.dataset_dir, config.data, samples, enc_a, enc_f)
    return assets, samples


def load_workspace(config: RunConfig):
    for p in (config.assets_path, os.path.join(config.dataset_dir, "manifest.json")):
        if not os.path.exists(p):
            raise ConfigError(f"missing input: {p} (run synth-data first)")
    assets = headmodel.load_assets(config.assets_path)
    _, samples, enc_a, enc_f, manifest = synthdata.load_dataset(config.dataset_dir)
    return assets, samples, enc_a, enc_f, manifest


def _split_samples(samples, manifest):
    train_ids = set(manifest["split"]["train_identities"])
    train = [s for s in samples if s.identity in train_ids]
    val = [s for s in samples if s.identity not in train_ids]
    return train, val


# -- training -----------------------------------------------------------------


def _diffusion_config(config: RunConfig, which: str) -> DiffusionConfig:
    data = config.data
    if which == "idgen":
        tc = config.idgen
        return DiffusionConfig(
            coeff_dim=data.shape_dim, cond_dim=data.embed_dim, in_channels=4,
            channels=tc.channels, time_dim=tc.time_dim, heads=tc.heads,
            use_cond_adapter=True, T=tc.T, precision=config.precision)
    tc = config.expgen
    return DiffusionConfig(
        coeff_dim=data.expr_dim, cond_dim=2 * data.embed_dim, in_channels=2,
        channels=tc.channels, time_dim=tc.time_dim, heads=tc.heads,
        use_cond_adapter=False, T=tc.T, precision=config.precision)


def cmd_train(network: str, config: RunConfig):
    """Train one network and write its checkpoint plus a step/loss CSV."""
    if network not in ("idgen", "expgen", "idrank"):
        raise ConfigError(f"unknown network {network!r}")
    assets, samples, _, _, manifest = load_workspace(config)
    train, _ = _split_samples(samples, manifest)
    rng = derive_rng(config.seed, f"train-{network}")
    log_path = config.path(f"{network}_metrics.csv")
    dump_config(config, config.out_dir)

    if network == "idgen":
        model = DiffusionModel(_diffusion_config(config, "idgen"),
                               seed=int(derive_rng(config.seed, "init-idgen").integers(2**31)))
        x0 = np.stack([s.beta for s in train])
        cond = np.stack([s.ca for s in train])
        tc = config.idgen
        train_diffusion(model, x0, cond, tc.steps, tc.batch, tc.lr, rng, log_path)
        model.save(config.ckpt_path("idgen"))
        return model

    if network == "expgen":
        model = DiffusionModel(_diffusion_config(config, "expgen"),
                               seed=int(derive_rng(config.seed, "init-expgen").integers(2**31)))
        x0 = np.stack([s.psi for s in train])
        cond = np.stack([s.condition for s in train])
        tc = config.expgen
        train_diffusion(model, x0, cond, tc.steps, tc.batch, tc.lr, rng, log_path)
        model.save(config.ckpt_path("expgen"))
        return model

    # idrank: requires a trained, frozen idgen
    idgen_path = config.ckpt_path("idgen")
    if not os.path.exists(idgen_path):
        raise ConfigError(f"idrank training requires an idgen checkpoint at {idgen_path}")
    idgen = DiffusionModel.load(idgen_path)
    idgen.freeze()
    rc = config.idrank
    net = RankNet(RankConfig(assets.n_frontal, 2 * config.data.embed_dim, rc.widths,
                             config.precision),
                  seed=int(derive_rng(config.seed, "init-idrank").integers(2**31)))
    fit_target_head(net, np.stack([s.condition for s in train]),
                    [synthdata.make_gt_mesh(assets, s, neutral=True)[1] for s in train],
                    ridge=rc.ridge)

    def sample_candidates(sample, step_rng):
        # most training sets come from the generator (fine-grained ranking);
        # a fraction mixes in prior draws so the scorer also separates
        # off-manifold candidates, the regime the mixed-pool ablation probes
        if rc.prior_mix > 0 and step_rng.random() < rc.prior_mix:
            n_model = rc.n_candidates // 2
            prior = config.data.shape_scale * step_rng.standard_normal(
                (rc.n_candidates - n_model, config.data.shape_dim))
            model = idgen.sample_batch(sample.ca, n_model, step_rng, rc.sample_steps)
            coeffs = np.concatenate([prior, model], axis=0)
        else:
            coeffs = idgen.sample_batch(sample.ca, rc.n_candidates, step_rng, rc.sample_steps)
        cands = np.stack([_frontal_from_beta(assets, b) for b in coeffs])
        _, gt_frontal = synthdata.make_gt_mesh(assets, sample, neutral=True)
        return cands, gt_frontal

    items = [(s.condition, s) for s in train]
    train_ranknet(net, sample_candidates, items, rc.steps, rc.lr, rng, log_path,
                  rc.resample_every)
    net.save(config.ckpt_path("idrank"))
    return net


def _frontal_from_beta(assets, beta):
    mesh = headmodel.reconstruct(assets, beta[: assets.n_shape],
                                 np.zeros(assets.pose_dim), np.zeros(assets.n_expr))
    return headmodel.extract_frontal(mesh, assets)


# -- reconstruction -----------------------------------------------------------


@dataclass
class ReconstructionSet:
    input_id: str
    selected_beta: np.ndarray
    selected_index: int
    scores: np.ndarray
    expressions: np.ndarray      # N_e x expr_dim
    meshes: list                 # N_e meshes sharing selected_beta


def reconstruct_one(assets, idgen, expgen, idrank, sample, config: RunConfig, input_id):
    """Sample N shapes, rank, select, sample expressions, build meshes."""
    n = config.n_samples
    n_expr = config.expr_samples or n
    rng_s = derive_rng(config.seed, "reconstruct-shape", input_id)
    coeffs = idgen.sample_batch(sample.ca, n, rng_s, config.step_count)
    if n >= 2 and idrank is not None:
        cands = np.stack([_frontal_from_beta(assets, b) for b in coeffs])
        scores = idrank.score(cands, sample.condition)
        sel = select(scores)
    else:
        scores = np.zeros(n)
        sel = 0
    beta = coeffs[sel]
    rng_e = derive_rng(config.seed, "reconstruct-expr", input_id)
    psis = expgen.sample_batch(sample.condition, n_expr, rng_e, config.step_count)
    meshes = [headmodel.reconstruct(assets, beta[: assets.n_shape], np.zeros(assets.pose_dim),
                                    p[: assets.n_expr]) for p in psis]
    return ReconstructionSet(input_id, beta, sel, scores, psis, meshes)


def cmd_reconstruct(config: RunConfig, input_ids=None):
    """Run the full flow for validation inputs; write OBJ meshes + JSON sidecars."""
    assets, samples, _, _, manifest = load_workspace(config)
    idgen = DiffusionModel.load(config.ckpt_path("idgen"))
    expgen = DiffusionModel.load(config.ckpt_path("expgen"))
    idrank = RankNet.load(config.ckpt_path("idrank")) if os.path.exists(config.ckpt_path("idrank")) else None
    idgen.freeze()
    expgen.freeze()
    _, val = _split_samples(samples, manifest)
    chosen = val if input_ids is None else [val[int(i)] for i in input_ids]
    out_root = config.path("reconstructions")
    os.makedirs(out_root, exist_ok=True)
    dump_config(config, out_root)
    results = []
    for j, sample in enumerate(chosen):
        input_id = f"val{j:04d}"
        rec = reconstruct_one(assets, idgen, expgen, idrank, sample, config, input_id)
        rec_dir = os.path.join(out_root, input_id)
        os.makedirs(rec_dir, exist_ok=True)
        for k, mesh in enumerate(rec.meshes):
            headmodel.write_obj(os.path.join(rec_dir, f"expr{k:03d}.obj"), mesh)
        sidecar = {
            "input_id": input_id,
            "selected_index": rec.selected_index,
            "selected_beta": rec.selected_beta.tolist(),
            "scores": rec.scores.tolist(),
            "expressions": rec.expressions.tolist(),
            "seed": config.seed,
        }
        with open(os.path.join(rec_dir, "coefficients.json"), "w") as f:
            json.dump(sidecar, f, sort_keys=True)
        results.append(rec)
    return results


# -- ranking reports and baselines --------------------------------------------


def rank_report(config: RunConfig, pool="model", max_inputs=None):
    """Per-input ranking outcome rows on the validation split.

    pool: 'model' (diffusion candidates), 'prior' (coefficient-prior draws),
    or 'mixed' (50/50 prior + model, the ranking-importance ablation layout).
    Returns rows of (input id, selected index, selected/mean/min distance).
    """
    assets, samples, _, _, manifest = load_workspace(config)
    idgen = DiffusionModel.load(config.ckpt_path("idgen"))
    idgen.freeze()
    idrank = RankNet.load(config.ckpt_path("idrank"))
    _, val = _split_samples(samples, manifest)
    if max_inputs is not None:
        val = val[:max_inputs]
    n = config.n_samples
    rows = []
    for j, sample in enumerate(val):
        input_id = f"val{j:04d}"
        rng = derive_rng(config.seed, f"rank-report-{pool}", input_id)
        coeffs = _candidate_pool(idgen, sample, n, rng, config, pool)
        cands = np.stack([_frontal_from_beta(assets, b) for b in coeffs])
        _, gt_frontal = synthdata.make_gt_mesh(assets, sample, neutral=True)
        d = np.array([vertex_distance(c, gt_frontal) for c in cands])
        scores = idrank.score(cands, sample.condition)
        sel = select(scores)
        rows.append({
            "input_id": input_id, "selected_index": sel,
            "selected_distance": float(d[sel]), "mean_distance": float(d.mean()),
            "ideal_distance": float(d.min()),
        })
    return rows


def _candidate_pool(idgen, sample, n, rng, config, pool):
    if pool == "model":
        return idgen.sample_batch(sample.ca, n, rng, config.step_count)
    prior = config.data.shape_scale * rng.standard_normal((n, config.data.shape_dim))
    if pool == "prior":
        return prior
    if pool == "mixed":
        n_model = n // 2
        model = idgen.sample_batch(sample.ca, n_model, rng, config.step_count)
        return np.concatenate([prior[: n - n_model], model], axis=0)
    raise ConfigError(f"unknown candidate pool {pool!r}")


def write_rank_report(config: RunConfig, pool="model", max_inputs=None):
    rows = rank_report(config, pool, max_inputs)
    os.makedirs(config.out_dir, exist_ok=True)
    path = config.path(f"rank_report_{pool}.csv")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["input_id", "selected_index", "selected_distance",
                                          "mean_distance", "ideal_distance"])
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    return path, rows


def cmd_baseline_flame(config: RunConfig, max_inputs=None):
    """Coefficient-prior candidate draws evaluated with the same protocol."""
    assets, samples, _, _, manifest = load_workspace(config)
    _, val = _split_samples(samples, manifest)
    if max_inputs is not None:
        val = val[:max_inputs]
    rows = []
    for j, sample in enumerate(val):
        input_id = f"val{j:04d}"
        rng = derive_rng(config.seed, "baseline-flame", input_id)
        prior = config.data.shape_scale * rng.standard_normal((config.n_samples, config.data.shape_dim))
        cands = np.stack([_frontal_from_beta(assets, b) for b in prior])
        _, gt_frontal = synthdata.make_gt_mesh(assets, sample, neutral=True)
        d = np.array([vertex_distance(c, gt_frontal) for c in cands])
        rows.append({"input_id": input_id, "mean_distance": float(d.mean()),
                     "ideal_distance": float(d.min()), "median_distance": float(np.median(d))})
    os.makedirs(config.out_dir, exist_ok=True)
    path = config.path("baseline_flame.csv")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["input_id", "mean_distance", "ideal_distance", "median_distance"])
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    return path, rows


# -- evaluation ---------------------------------------------------------------


def cmd_evaluate(protocol: str, config: RunConfig, max_inputs=None):
    """Score written reconstructions against dataset ground truth."""
    if protocol not in ("now_style", "co545_style"):
        raise ConfigError(f"unknown protocol {protocol!r}")
    assets, samples, _, _, manifest = load_workspace(config)
    _, val = _split_samples(samples, manifest)
    rec_root = config.path("reconstructions")
    if not os.path.isdir(rec_root):
        raise ConfigError(f"no reconstructions at {rec_root} (run reconstruct first)")
    pairs = []
    per_row = []
    ids = sorted(d for d in os.listdir(rec_root) if d.startswith("val"))
    if max_inputs is not None:
        ids = ids[:max_inputs]
    for input_id in ids:
        j = int(input_id[3:])
        if j >= len(val):
            raise ConfigError(f"reconstruction {input_id} has no matching validation sample")
        sample = val[j]
        with open(os.path.join(rec_root, input_id, "coefficients.json")) as f:
            sidecar = json.load(f)
        beta = np.asarray(sidecar["selected_beta"])
        neutral = protocol == "now_style"
        gt_mesh, _ = synthdata.make_gt_mesh(assets, sample, neutral=neutral)
        if neutral:
            pred = headmodel.reconstruct(assets, beta[: assets.n_shape],
                                         np.zeros(assets.pose_dim), np.zeros(assets.n_expr))
            mask = assets.frontal_mask
        else:
            # score the first expression hypothesis under the occlusion mask
            psi = np.asarray(sidecar["expressions"][0])
            pred = headmodel.reconstruct(assets, beta[: assets.n_shape],
                                         np.zeros(assets.pose_dim), psi[: assets.n_expr])
            visible = evalproto.visible_vertices(gt_mesh.vertices, gt_mesh.faces) & assets.frontal_mask
            occluded = _embedding_occlusion_to_vertices(assets, sample)
            mask = visible & ~occluded
            if not mask.any():
                mask = visible
        label = "occluded" if sample.region != "none" else "unoccluded"
        pairs.append(evalproto.EvalPair(pred.vertices, gt_mesh.vertices, mask,
                                        assets.landmarks, label))
        per_row.append(input_id)
    mode = config.alignment
    report = (evalproto.now_style_stats(pairs, mode) if protocol == "now_style"
              else evalproto.co545_style_stats(pairs, mode))
    out_dir = config.path("reports")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{protocol}.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["input_id", "error_mm", "subset"])
        for input_id, err, label in zip(per_row, report.errors_mm, report.labels):
            w.writerow([input_id, f"{err:.9g}", label])
    json_path = os.path.join(out_dir, f"{protocol}.json")
    with open(json_path, "w") as f:
        json.dump({"seed": config.seed, **report.to_dict()}, f, indent=2, sort_keys=True)
    return report, csv_path, json_path


def cmd_export_mesh(config: RunConfig, out_path, coeffs_path=None):
    """Build one mesh from coefficient JSON ({"beta": [...], "psi": [...],
    "theta": [...]}, all optional, defaulting to zeros) and write it as OBJ."""
    if not os.path.exists(config.assets_path):
        raise ConfigError(f"missing assets at {config.assets_path}")
    assets = headmodel.load_assets(config.assets_path)
    coeffs = {}
    if coeffs_path:
        try:
            with open(coeffs_path) as f:
                coeffs = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read coefficients {coeffs_path}: {e}") from e
    beta = np.asarray(coeffs.get("beta", np.zeros(assets.n_shape)), dtype=np.float64)
    psi = np.asarray(coeffs.get("psi", np.zeros(assets.n_expr)), dtype=np.float64)
    theta = np.asarray(coeffs.get("theta", np.zeros(assets.pose_dim)), dtype=np.float64)
    mesh = headmodel.reconstruct(assets, beta, theta, psi)
    headmodel.write_obj(out_path, mesh)
    return out_path


def _embedding_occlusion_to_vertices(assets, sample):
    """Map an embedding-space occlusion region onto a frontal vertex patch.

    Region labels correspond to fixed face areas (eyes = upper band, mouth =
    lower band); 'random' occludes a horizontal band proportional to the
    masked fraction. Returns a boolean vertex mask.
    """
    n = assets.n_vertices
    if sample.region == "none" or sample.occluded_coords.size == 0:
        return np.zeros(n, dtype=bool)
    y = assets.template[:, 1]
    lo, hi = y.min(), y.max()
    frac = sample.occluded_coords.size / sample.ca.size
    if sample.region == "eyes":
        band = (y > lo + 0.55 * (hi - lo)) & (y < lo + (0.55 + 0.4 * frac) * (hi - lo))
    elif sample.region == "mouth":
        band = (y > lo + (0.45 - 0.4 * frac) * (hi - lo)) & (y < lo + 0.45 * (hi - lo))
    else:
        start = (sample.occluded_coords[0] / sample.ca.size) * 0.8
        band = (y > lo + start * (hi - lo)) & (y < lo + (start + 0.5 * frac) * (hi - lo))
    return band & assets.frontal_mask
