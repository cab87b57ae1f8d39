"""Deterministic synthetic stand-in for image encoders and capture datasets.

Ground-truth coefficients are drawn per identity/sample; condition embeddings
are frozen random linear maps of the coefficients followed by unit
normalization, so the clean embedding provably determines the coefficients.
Occlusion is modeled in embedding space: a contiguous coordinate block is
zeroed (region keyed to an occlusion label) and Gaussian noise is added.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .gradcore import DATASET_MAGIC, read_container, write_container
from . import headmodel

OCCLUSION_REGIONS = ("none", "eyes", "mouth", "random")


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 64
    samples_per_identity: int = 32
    shape_dim: int = 300
    expr_dim: int = 50
    embed_dim: int = 512        # each of c_a and c_f
    occlusion_rate: float = 0.5
    noise_sigma: float = 0.02
    shape_scale: float = 1.0
    expr_scale: float = 1.0
    seed: int = 0
    val_fraction: float = 0.25

    def __post_init__(self):
        if min(self.n_identities, self.samples_per_identity, self.shape_dim,
               self.expr_dim, self.embed_dim) <= 0:
            raise ValueError("counts and dims must be positive")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion rate must be in [0, 1]")
        if self.embed_dim < self.shape_dim:
            raise ValueError("embed_dim must be >= shape_dim for an injective encoder")


@dataclass
class SynthSample:
    identity: int
    beta: np.ndarray
    psi: np.ndarray
    clean_ca: np.ndarray
    clean_cf: np.ndarray
    ca: np.ndarray              # corrupted
    cf: np.ndarray              # corrupted
    occluded_coords: np.ndarray  # indices masked in both embeddings
    region: str = "none"

    @property
    def condition(self):
        """1024-d ranking/expression condition (c_a || c_f)."""
        return np.concatenate([self.ca, self.cf])


@dataclass
class Encoder:
    """Frozen random linear-plus-normalization embedding of a coefficient space."""
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def create(cls, rng, coeff_dim, embed_dim):
        w = rng.standard_normal((embed_dim, coeff_dim)) / np.sqrt(coeff_dim)
        b = 0.1 * rng.standard_normal(embed_dim)
        return cls(w, b)

    def __call__(self, coeffs):
        raw = self.weight @ np.asarray(coeffs) + self.bias
        return raw / np.linalg.norm(raw)


def _region_block(region, embed_dim, rate, rng):
    """Contiguous masked coordinate block for one occlusion region label."""
    size = int(rate * embed_dim)
    if size == 0 or region == "none":
        return np.empty(0, dtype=np.int64)
    anchors = {"eyes": 0.1, "mouth": 0.6}
    if region in anchors:
        start = int(anchors[region] * embed_dim)
    else:
        start = int(rng.integers(0, embed_dim - size + 1))
    start = min(start, embed_dim - size)
    return np.arange(start, start + size, dtype=np.int64)


def _corrupt(clean, coords, sigma, rng):
    out = clean.copy()
    out[coords] = 0.0
    if sigma > 0:
        out = out + sigma * rng.standard_normal(out.shape)
    return out


def generate_dataset(config: SynthConfig):
    """Pure function of config: list of SynthSample plus the frozen encoders."""
    rng = np.random.default_rng(config.seed)
    enc_a = Encoder.create(rng, config.shape_dim, config.embed_dim)
    enc_f = Encoder.create(rng, config.expr_dim, config.embed_dim)
    samples = []
    for ident in range(config.n_identities):
        beta = config.shape_scale * rng.standard_normal(config.shape_dim)
        for _ in range(config.samples_per_identity):
            psi = config.expr_scale * rng.standard_normal(config.expr_dim)
            clean_ca = enc_a(beta)
            clean_cf = enc_f(psi)
            if config.occlusion_rate > 0 and rng.random() < 0.75:
                region = str(rng.choice(["eyes", "mouth", "random"]))
            else:
                region = "none"
            coords = _region_block(region, config.embed_dim, config.occlusion_rate, rng)
            ca = _corrupt(clean_ca, coords, config.noise_sigma, rng)
            cf = _corrupt(clean_cf, coords, config.noise_sigma, rng)
            samples.append(SynthSample(ident, beta, psi, clean_ca, clean_cf,
                                       ca, cf, coords, region))
    return samples, enc_a, enc_f


def make_gt_mesh(assets: headmodel.ModelAssets, sample: SynthSample, neutral=False):
    """Ground-truth mesh and its frontal vertices for one sample.

    neutral=True drops the expression (shape-supervision ground truth for
    ranking); otherwise the full expressive mesh is built. Pose is zero.
    """
    psi = np.zeros(assets.n_expr) if neutral else sample.psi[: assets.n_expr]
    mesh = headmodel.reconstruct(assets, sample.beta[: assets.n_shape],
                                 np.zeros(assets.pose_dim), psi)
    return mesh, headmodel.extract_frontal(mesh, assets)


def split_ids(config: SynthConfig):
    """Deterministic train/val identity split declared in the manifest."""
    n_val = max(1, int(round(config.val_fraction * config.n_identities)))
    ids = np.arange(config.n_identities)
    return ids[: config.n_identities - n_val], ids[config.n_identities - n_val :]


# -- persistence --------------------------------------------------------------


def save_dataset(dir_path, config: SynthConfig, samples, enc_a: Encoder, enc_f: Encoder):
    """Manifest JSON + binary blobs in the shared container format."""
    import os

    os.makedirs(dir_path, exist_ok=True)
    arrays = {
        "beta": np.stack([s.beta for s in samples]),
        "psi": np.stack([s.psi for s in samples]),
        "clean_ca": np.stack([s.clean_ca for s in samples]),
        "clean_cf": np.stack([s.clean_cf for s in samples]),
        "ca": np.stack([s.ca for s in samples]),
        "cf": np.stack([s.cf for s in samples]),
        "identity": np.array([s.identity for s in samples], dtype=np.int64),
        "occ_start": np.array(
            [s.occluded_coords[0] if s.occluded_coords.size else -1 for s in samples],
            dtype=np.int64),
        "occ_size": np.array([s.occluded_coords.size for s in samples], dtype=np.int64),
        "enc_a_weight": enc_a.weight, "enc_a_bias": enc_a.bias,
        "enc_f_weight": enc_f.weight, "enc_f_bias": enc_f.bias,
    }
    blob_path = os.path.join(dir_path, "samples.bin")
    write_container(blob_path, DATASET_MAGIC, arrays,
                    {"regions": [s.region for s in samples]})
    train_ids, val_ids = split_ids(config)
    manifest = {
        "config": asdict(config),
        "blobs": "samples.bin",
        "n_samples": len(samples),
        "split": {"train_identities": train_ids.tolist(),
                  "val_identities": val_ids.tolist()},
    }
    with open(os.path.join(dir_path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_dataset(dir_path):
    import os

    with open(os.path.join(dir_path, "manifest.json")) as f:
        manifest = json.load(f)
    config = SynthConfig(**manifest["config"])
    arrays, meta = read_container(os.path.join(dir_path, manifest["blobs"]), DATASET_MAGIC)
    samples = []
    for i in range(manifest["n_samples"]):
        start, size = int(arrays["occ_start"][i]), int(arrays["occ_size"][i])
        coords = np.arange(start, start + size, dtype=np.int64) if size else np.empty(0, dtype=np.int64)
        samples.append(SynthSample(
            int(arrays["identity"][i]), arrays["beta"][i], arrays["psi"][i],
            arrays["clean_ca"][i], arrays["clean_cf"][i],
            arrays["ca"][i], arrays["cf"][i], coords, meta["regions"][i]))
    enc_a = Encoder(arrays["enc_a_weight"], arrays["enc_a_bias"])
    enc_f = Encoder(arrays["enc_f_weight"], arrays["enc_f_bias"])
    return config, samples, enc_a, enc_f, manifest
