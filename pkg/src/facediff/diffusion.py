"""Conditional DDPM over low-dimensional coefficient vectors.

Two instances are used in practice: a shape model (300-d coefficients,
512-d condition) and an expression model (50-d coefficients, 1024-d
condition). The denoiser is a small 1-D U-Net with a self-attention
bottleneck; the condition and sinusoidal time embedding are concatenated
and injected into every resolution level as a per-channel bias.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .gradcore import (
    AdamState,
    Module,
    NonFiniteError,
    ParamStore,
    SelfAttention,
    Tensor,
    adam_step,
    concat,
    load_checkpoint,
    repeat2,
    save_checkpoint,
)
from .gradcore.nn import Conv1d, LayerNorm, Linear


# -- noise schedule -----------------------------------------------------------


class NoiseSchedule:
    """Precomputed beta_t, alpha_t = 1 - beta_t, alpha_bar_t = prod alpha."""

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty vector")
        if not (0.0 < betas[0] and betas[-1] < 1.0 and np.all(np.diff(betas) >= 0)):
            raise ValueError("betas must be non-decreasing in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        if self.alpha_bars[-1] >= 0.01:
            raise ValueError(
                f"schedule does not reach near-total noising (alpha_bar_T={self.alpha_bars[-1]:.4g})"
            )

    @property
    def T(self):
        return len(self.betas)

    @classmethod
    def linear(cls, T, beta_min=1e-4, beta_max=0.02, reference_steps=1000):
        """Linear schedule; the range scales with reference_steps/T so that the
        total noise injected is independent of the step count."""
        scale = reference_steps / T
        return cls(np.linspace(beta_min * scale, beta_max * scale, T))

    def alpha_bar(self, t):
        """alpha_bar at 1-based step t; t=0 means no noising."""
        t = np.asarray(t)
        return np.where(t > 0, self.alpha_bars[np.maximum(t, 1) - 1], 1.0)


def forward_diffuse(x0, t, eps, schedule: NoiseSchedule):
    """Closed-form noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps. t may be scalar
    or per-row for batched x0."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ValueError("noise must match x0 shape")
    tt = np.asarray(t)
    if np.any(tt < 0) or np.any(tt > schedule.T):
        raise ValueError(f"t out of range [0, {schedule.T}]")
    ab = schedule.alpha_bar(tt)
    if x0.ndim == 2 and tt.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def sinusoidal_embedding(t, width):
    """Interleaved sin/cos at geometrically spaced frequencies (base 10000)."""
    if width % 2 != 0:
        raise ValueError("embedding width must be even")
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
    emb = np.empty(ang.shape[:-1] + (width,))
    emb[..., 0::2] = np.sin(ang)
    emb[..., 1::2] = np.cos(ang)
    return emb


# -- denoiser network ---------------------------------------------------------


@dataclass(frozen=True)
class DiffusionConfig:
    coeff_dim: int
    cond_dim: int
    in_channels: int
    channels: tuple = (32, 64, 128)
    time_dim: int = 128
    heads: int = 4
    use_cond_adapter: bool = False
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    reference_steps: int = 1000
    precision: str = "f4"

    def __post_init__(self):
        if self.coeff_dim % self.in_channels != 0:
            raise ValueError("coeff_dim must be divisible by in_channels")

    @property
    def length(self):
        return self.coeff_dim // self.in_channels

    @property
    def dtype(self):
        return np.float32 if self.precision == "f4" else np.float64


class ResBlock(Module):
    def __init__(self, c_in, c_out, cond_dim, rng, dtype):
        self.conv_a = Conv1d(c_in, c_out, 3, rng, dtype)
        self.conv_b = Conv1d(c_out, c_out, 3, rng, dtype)
        self.cond_proj = Linear(cond_dim, c_out, rng, dtype)
        self.norm = LayerNorm(c_out, dtype)
        self.skip = Conv1d(c_in, c_out, 1, rng, dtype) if c_in != c_out else None

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        b = x.shape[0]
        h = self.conv_a(x)
        h = h + self.cond_proj(cond).reshape(b, h.shape[1], 1)
        h = self.norm(h.transpose(0, 2, 1)).transpose(0, 2, 1).gelu()
        h = self.conv_b(h)
        return h + (x if self.skip is None else self.skip(x))


class DenoiserNet(Module):
    """1-D U-Net over coefficient vectors reshaped to channels x length."""

    def __init__(self, config: DiffusionConfig, rng):
        cfg, dtype = config, config.dtype
        self.config = config
        cond_dim = cfg.cond_dim + cfg.time_dim
        chans = cfg.channels
        self.adapter = Linear(cfg.cond_dim, cfg.cond_dim, rng, dtype) if cfg.use_cond_adapter else None
        self.stem = Conv1d(cfg.in_channels, chans[0], 3, rng, dtype)
        # learned positional embedding: breaks the conv stack's translation
        # symmetry so per-channel condition biases can drive position-dependent
        # predictions
        self.pos = Tensor(0.1 * rng.standard_normal((1, chans[0], cfg.length)).astype(dtype),
                          requires_grad=True)
        self.enc = [ResBlock(chans[i], chans[i], cond_dim, rng, dtype) for i in range(len(chans))]
        self.down = [Conv1d(chans[i], chans[i + 1], 3, rng, dtype, stride=2, pad=1)
                     for i in range(len(chans) - 1)]
        self.mid_a = ResBlock(chans[-1], chans[-1], cond_dim, rng, dtype)
        self.attn = SelfAttention(chans[-1], cfg.heads, rng, dtype)
        self.attn_norm = LayerNorm(chans[-1], dtype)
        self.mid_b = ResBlock(chans[-1], chans[-1], cond_dim, rng, dtype)
        self.up = [Conv1d(chans[i + 1], chans[i], 3, rng, dtype) for i in range(len(chans) - 1)]
        self.dec = [ResBlock(2 * chans[i], chans[i], cond_dim, rng, dtype)
                    for i in range(len(chans) - 1)]
        self.head = Conv1d(chans[0], cfg.in_channels, 3, rng, dtype)

    def __call__(self, x_t, t, cond) -> Tensor:
        cfg = self.config
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=cfg.dtype))
        b = x_t.shape[0]
        if x_t.shape != (b, cfg.coeff_dim):
            raise ValueError(f"expected input B x {cfg.coeff_dim}, got {x_t.shape}")
        cond = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=cfg.dtype))
        if cond.shape != (b, cfg.cond_dim):
            raise ValueError(f"expected condition B x {cfg.cond_dim}, got {cond.shape}")
        if self.adapter is not None:
            cond = self.adapter(cond)
        temb = Tensor(sinusoidal_embedding(t, cfg.time_dim).astype(cfg.dtype))
        c = concat([cond, temb], axis=-1)

        h = self.stem(x_t.reshape(b, cfg.in_channels, cfg.length)) + self.pos
        skips = []
        n_levels = len(cfg.channels)
        for i in range(n_levels):
            h = self.enc[i](h, c)
            if i < n_levels - 1:
                skips.append(h)
                h = self.down[i](h)
        h = self.mid_a(h, c)
        a = self.attn(self.attn_norm(h.transpose(0, 2, 1)))
        h = h + a.transpose(0, 2, 1)
        h = self.mid_b(h, c)
        for i in reversed(range(n_levels - 1)):
            skip = skips[i]
            h = repeat2(h, axis=-1)[:, :, : skip.shape[2]]
            h = self.up[i](h)
            h = concat([h, skip], axis=1)
            h = self.dec[i](h, c)
        return self.head(h).reshape(b, cfg.coeff_dim)


# -- model wrapper ------------------------------------------------------------


class DiffusionModel:
    def __init__(self, config: DiffusionConfig, seed=0):
        self.config = config
        self.schedule = NoiseSchedule.linear(
            config.T, config.beta_min, config.beta_max, config.reference_steps
        )
        self.net = DenoiserNet(config, np.random.default_rng(seed))
        self.store = ParamStore.from_module(self.net)

    def freeze(self):
        self.store.freeze()

    def training_step(self, x0, cond, rng) -> float:
        """One epsilon-prediction step: sample t and noise, L1 loss, backprop.
        The caller applies the optimizer."""
        x0 = np.asarray(x0, dtype=self.config.dtype)
        cond = np.asarray(cond, dtype=self.config.dtype)
        if x0.ndim != 2 or x0.shape[0] == 0:
            raise ValueError("batch must be non-empty B x coeff_dim")
        b = x0.shape[0]
        t = rng.integers(1, self.schedule.T + 1, size=b)
        eps = rng.standard_normal((b, self.config.coeff_dim)).astype(self.config.dtype)
        x_t = forward_diffuse(x0, t, eps, self.schedule).astype(self.config.dtype)
        pred = self.net(x_t, t, cond)
        loss = (pred - Tensor(eps)).abs().mean()
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError("diffusion training step produced a non-finite loss")
        loss.backward()
        self.store.fill_missing_grads()
        return value

    def _timesteps(self, step_count):
        T = self.schedule.T
        if step_count is None or step_count >= T:
            return np.arange(T, 0, -1)
        if step_count < 1:
            raise ValueError("step_count must be >= 1")
        return np.unique(np.linspace(1, T, step_count).round().astype(int))[::-1]

    def sample_batch(self, cond, n, rng, step_count=None):
        """Ancestral sampling of n vectors sharing one condition."""
        if n < 1:
            raise ValueError("n must be >= 1")
        cfg = self.config
        cond = np.asarray(cond, dtype=cfg.dtype)
        if cond.shape != (cfg.cond_dim,):
            raise ValueError(f"condition must have dim {cfg.cond_dim}")
        cond_b = np.broadcast_to(cond, (n, cfg.cond_dim))
        x = rng.standard_normal((n, cfg.coeff_dim)).astype(cfg.dtype)
        steps = self._timesteps(step_count)
        for idx, t in enumerate(steps):
            ab_t = self.schedule.alpha_bars[t - 1]
            t_prev = steps[idx + 1] if idx + 1 < len(steps) else 0
            ab_prev = self.schedule.alpha_bars[t_prev - 1] if t_prev > 0 else 1.0
            beta_eff = 1.0 - ab_t / ab_prev
            eps_hat = self.net(x, np.full(n, t), cond_b).data
            mean = (x - beta_eff / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t / ab_prev)
            if t_prev > 0:
                var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)
                x = mean + np.sqrt(var) * rng.standard_normal((n, cfg.coeff_dim))
            else:
                x = mean
            x = x.astype(cfg.dtype)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"non-finite sampler state at t={t}")
        return x

    def sample(self, cond, rng, step_count=None):
        return self.sample_batch(cond, 1, rng, step_count)[0]

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        meta = {"kind": "diffusion", "config": asdict(self.config)}
        meta["config"]["channels"] = list(self.config.channels)
        save_checkpoint(path, self.store, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        cfg_d = dict(meta["config"])
        cfg_d["channels"] = tuple(cfg_d["channels"])
        model = cls(DiffusionConfig(**cfg_d))
        model.store.load_arrays(arrays)
        return model


def train_diffusion(model: DiffusionModel, x0s, conds, steps, batch, lr, rng, log_path=None):
    """Minibatch training driver; returns the per-step loss history."""
    x0s = np.asarray(x0s)
    conds = np.asarray(conds)
    opt = AdamState(lr=lr)
    losses = []
    log = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log) if log else None
    if writer:
        writer.writerow(["step", "loss"])
    try:
        for step in range(steps):
            idx = rng.integers(0, len(x0s), size=min(batch, len(x0s)))
            loss = model.training_step(x0s[idx], conds[idx], rng)
            adam_step(model.store, opt)
            losses.append(loss)
            if writer:
                writer.writerow([step, f"{loss:.6f}"])
    finally:
        if log:
            log.close()
    return losses
