"""Listwise ranking of generated shape hypotheses.

Each candidate is a frontal-vertex array; candidates are featurized as
(set mean || residual from the mean), scored one at a time by a shared-weight
MLP conditioned on the image embedding, and trained with a softmax
cross-entropy between the score distribution and a ground-truth distribution
derived from per-candidate vertex displacement errors. Lower error must map to
higher probability, so the ground-truth distribution uses negated distances.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .gradcore import (
    MLP,
    AdamState,
    Linear,
    NonFiniteError,
    ParamStore,
    Tensor,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    softmax,
)


def vertex_distance(candidate, ground_truth) -> float:
    """Mean over vertices of the Euclidean per-vertex displacement (meters)."""
    a = np.asarray(candidate, dtype=np.float64)
    b = np.asarray(ground_truth, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"candidate/ground-truth shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(b - a, axis=1).mean())


def build_features(candidates):
    """Mean-residual features: x_hat_i = (mean over set || candidate - mean).

    candidates: N x m x 3. Returns (features N x 6m, mean m x 3).
    """
    x = np.asarray(candidates, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] < 2 or x.shape[2] != 3:
        raise ValueError("need N >= 2 candidates of shape m x 3")
    mean = x.mean(axis=0)
    res = x - mean
    n = x.shape[0]
    feats = np.concatenate([np.broadcast_to(mean.reshape(1, -1), (n, mean.size)),
                            res.reshape(n, -1)], axis=1)
    return feats, mean


def gt_distribution(distances, tau=None):
    """Probability target over candidates, decreasing in distance.

    g_i = exp(-d_i / tau) / sum_j exp(-d_j / tau); tau defaults to the spread
    (population std) of the batch distances, so the target stays sharp even
    when candidates cluster far from zero and is invariant to rescaling the
    distance unit.
    """
    d = np.asarray(distances, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite distances")
    if tau is None:
        tau = float(np.std(d))
    if tau <= 1e-12:
        return np.full(d.shape, 1.0 / d.size)
    z = -d / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class RankConfig:
    n_frontal: int
    cond_dim: int = 1024
    widths: tuple = (512, 256, 64, 1)
    precision: str = "f4"
    target_head: bool = True     # score against a predicted target mesh

    @property
    def feature_dim(self):
        return 6 * self.n_frontal

    @property
    def dtype(self):
        return np.float32 if self.precision == "f4" else np.float64


class RankNet:
    """Shared-weight per-candidate scorer on (feature || condition).

    The score is an MLP on the concatenated input minus a scaled squared
    distance between the candidate and a target mesh predicted linearly from
    (set mean, condition). Ranking inside a tight candidate cluster amounts to
    measuring each residual along the cluster-to-target direction, a
    multiplicative interaction between the residual and the condition that a
    concatenation MLP alone is poor at expressing; the explicit distance term
    carries that interaction, and `fit_target_head` sets its prediction by
    closed-form ridge regression before listwise training.
    """

    def __init__(self, config: RankConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        dt = config.dtype
        self.mlp = MLP(config.feature_dim + config.cond_dim, config.widths, rng, dt)
        half = config.feature_dim // 2
        if config.target_head:
            self.head = Linear(half + config.cond_dim, half, rng, dt)
            self.dist_weight = Tensor(np.array([1.0], dtype=dt), requires_grad=True)
        else:
            self.head = None
            self.dist_weight = None
        params = list(self.mlp.parameters("mlp"))
        if self.head is not None:
            params += list(self.head.parameters("head"))
            params.append(("dist_weight", self.dist_weight))
        self.store = ParamStore(params)

    def forward(self, features, cond) -> Tensor:
        """Scores p_i for each candidate; permutation-equivariant by weight sharing."""
        cfg = self.config
        feats = np.asarray(features, dtype=cfg.dtype)
        cond = np.asarray(cond, dtype=cfg.dtype)
        if feats.ndim != 2 or feats.shape[1] != cfg.feature_dim:
            raise ValueError(f"features must be N x {cfg.feature_dim}, got {feats.shape}")
        if cond.shape != (cfg.cond_dim,):
            raise ValueError(f"condition must have dim {cfg.cond_dim}")
        n = feats.shape[0]
        # the residual half of the feature vector carries the ranking signal
        # but lives at the scale of the candidate spread (sub-millimeter);
        # normalize it per set so the scorer sees O(1) inputs at any spread
        half = cfg.feature_dim // 2
        mean_row = feats[:1, :half]
        res = feats[:, half:]
        spread = res.std()
        res_n = res / spread if spread > 0 else res
        inp = np.concatenate([feats[:, :half], res_n,
                              np.broadcast_to(cond, (n, cfg.cond_dim))], axis=1)
        scores = self.mlp(Tensor(inp)).reshape(n)
        if self.head is not None and spread > 0:
            ctx = Tensor(np.concatenate([mean_row, cond.reshape(1, -1)], axis=1))
            pred = self.head(ctx)                                  # 1 x half
            offset = (pred - Tensor(mean_row)) * float(1.0 / spread)
            z = Tensor(res_n) - offset                             # n x half
            dist = (z * z).sum(axis=1) * (1.0 / half)
            scores = scores - self.dist_weight * dist
        return scores

    def score(self, candidates, cond) -> np.ndarray:
        feats, _ = build_features(candidates)
        return self.forward(feats, cond).data.astype(np.float64)

    def save(self, path):
        meta = {"kind": "rank", "config": asdict(self.config)}
        meta["config"]["widths"] = list(self.config.widths)
        save_checkpoint(path, self.store, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        cfg_d = dict(meta["config"])
        cfg_d["widths"] = tuple(cfg_d["widths"])
        net = cls(RankConfig(**cfg_d))
        net.store.load_arrays(arrays)
        return net


def fit_target_head(net: RankNet, conditions, gt_frontals, ridge=1.0):
    """Closed-form ridge fit of the target-mesh head, then freeze it.

    conditions: n x cond_dim, gt_frontals: n meshes of shape m x 3. The head
    learns pred(cond) = (cond - mean_cond) @ A + mean_mesh with A solving the
    ridge-regularized normal equations; the set-mean half of its input is left
    at zero weight. Listwise training afterwards refines the rest of the
    scorer around the frozen prediction.
    """
    if net.head is None:
        raise ValueError("ranker was built without a target head")
    cfg = net.config
    X = np.asarray(conditions, dtype=np.float64)
    Y = np.stack([np.asarray(g, dtype=np.float64).ravel() for g in gt_frontals])
    half = cfg.feature_dim // 2
    if X.ndim != 2 or X.shape[1] != cfg.cond_dim or Y.shape != (X.shape[0], half):
        raise ValueError("conditions/meshes do not match the ranker dimensions")
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    xc, yc = X - xm, Y - ym
    a = np.linalg.solve(xc.T @ xc + ridge * np.eye(cfg.cond_dim), xc.T @ yc)
    weight = np.zeros((half + cfg.cond_dim, half))
    weight[half:] = a
    net.head.weight.data = weight.astype(cfg.dtype)
    net.head.bias.data = (ym - xm @ a).astype(cfg.dtype)
    net.head.weight.requires_grad = False
    net.head.bias.requires_grad = False


def rank_loss(scores: Tensor, g) -> Tensor:
    """Cross-entropy between the target distribution g and softmax(scores)."""
    g = np.asarray(g, dtype=np.float64)
    if scores.shape != g.shape:
        raise ValueError("scores and target distribution must have equal length")
    h = softmax(scores, axis=-1)
    return -(Tensor(g.astype(scores.dtype)) * (h + 1e-30).log()).sum()


def select(scores) -> int:
    """Index of the top-scoring candidate; ties break to the lowest index."""
    s = np.asarray(scores)
    if s.size == 0:
        raise ValueError("empty score list")
    return int(np.argmax(s))


def rank_metrics(predicted_order, gt_order, ks=(10, 20, 30), distances=None):
    """Top-k agreement metrics between a predicted and ground-truth ordering.

    Orders are permutations of 0..N-1, best candidate first. `ks` are
    percentages. When per-candidate distances are given, the error ratio
    (mean distance of the GT top-k) / (mean distance of the predicted top-k)
    is reported as well (1.0 is ideal).
    """
    pred = np.asarray(predicted_order)
    gt = np.asarray(gt_order)
    n = pred.size
    if sorted(pred.tolist()) != list(range(n)) or sorted(gt.tolist()) != list(range(n)):
        raise ValueError("orders must be permutations of 0..N-1")
    out = {}
    for k_pct in ks:
        k = max(1, int(round(n * k_pct / 100.0)))
        top_pred = set(pred[:k].tolist())
        top_gt = set(gt[:k].tolist())
        inter = len(top_pred & top_gt)
        out[f"precision@{k_pct}%"] = 100.0 * inter / k
        out[f"iou@{k_pct}%"] = inter / len(top_pred | top_gt)
        if distances is not None:
            d = np.asarray(distances, dtype=np.float64)
            pred_mean = d[pred[:k]].mean()
            out[f"error_ratio@{k_pct}"] = float(d[gt[:k]].mean() / pred_mean) if pred_mean > 0 else 1.0
    return out


def train_ranknet(net: RankNet, sample_candidates, items, steps, lr, rng,
                  log_path=None, resample_every=1):
    """Train the ranker against ground-truth vertex distances.

    sample_candidates(item, rng) -> (candidates N x m x 3, gt frontal m x 3);
    items is the pool of training inputs (each with a condition attribute or
    (condition, payload) tuple handled by the callback). Candidate sets are
    regenerated every `resample_every` visits to an item.
    """
    opt = AdamState(lr=lr)
    losses = []
    cache = {}
    log = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log) if log else None
    if writer:
        writer.writerow(["step", "loss"])
    try:
        for step in range(steps):
            i = int(rng.integers(0, len(items)))
            cond, item = items[i]
            if i not in cache or step % max(1, resample_every) == 0:
                cache[i] = sample_candidates(item, rng)
            candidates, gt_frontal = cache[i]
            d = np.array([vertex_distance(c, gt_frontal) for c in candidates])
            g = gt_distribution(d)
            feats, _ = build_features(candidates)
            scores = net.forward(feats, cond)
            loss = rank_loss(scores, g)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError("rank training step produced a non-finite loss")
            loss.backward()
            net.store.fill_missing_grads()
            adam_step(net.store, opt)
            losses.append(value)
            if writer:
                writer.writerow([step, f"{value:.6f}"])
    finally:
        if log:
            log.close()
    return losses
