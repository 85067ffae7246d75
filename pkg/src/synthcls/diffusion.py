"""Class-conditional DDPM: linear noise schedule, denoising training loss,
ancestral sampling with classifier-free guidance, and real-guided sampling
that starts the reverse chain from a noised reference image."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn, numcore as nc
from .numcore import AdamW, LrSchedule, Tensor, cosine_lr


@dataclass
class NoiseSchedule:
    """Per-timestep corruption ladders. Arrays are indexed by t-1 for
    t in [1, T]; alpha_bar_prev[t-1] is the cumulative product at t-1,
    with the t=0 convention equal to one."""
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    beta_tilde: np.ndarray
    sigma2: np.ndarray

    def check_t(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def build_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Linear beta ladder from beta_start to beta_end inclusive."""
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         alpha_bar_prev=alpha_bar_prev, beta_tilde=beta_tilde,
                         sigma2=beta_tilde.copy())


@dataclass
class GuidanceConfig:
    scale: float = 3.0        # guidance scale s
    drop_prob: float = 0.1    # probability of replacing the condition with the null token


@dataclass
class RealGuidanceConfig:
    rho: float                 # start fraction; t* = round(rho * T)
    reference: np.ndarray      # reference image batch

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0,1], got {self.rho}")
        if len(self.reference) == 0:
            raise ValueError("reference batch is empty")


# t* values tied to shot counts, expressed as fractions of T
RG_RHO_BY_SHOT = {16: 0.15, 8: 0.20, 4: 0.35, 2: 0.40, 1: 0.50}


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Jump directly to the noisy latent at step t: sqrt(ab_t) x0 + sqrt(1-ab_t) eps."""
    sched.check_t(t)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise nc.ShapeError(f"q_sample: x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar[t - 1]
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


def posterior_mean_var(x0, xt, t, sched: NoiseSchedule):
    """Exact Gaussian posterior q(x_{t-1} | x_t, x_0): mean and variance."""
    sched.check_t(t)
    x0 = np.asarray(x0)
    xt = np.asarray(xt)
    if x0.shape != xt.shape:
        raise nc.ShapeError(f"posterior_mean_var: x0 {x0.shape} vs xt {xt.shape}")
    i = t - 1
    denom = 1.0 - sched.alpha_bar[i]
    coeff_x0 = np.sqrt(sched.alpha_bar_prev[i]) * sched.beta[i] / denom
    coeff_xt = np.sqrt(sched.alpha[i]) * (1.0 - sched.alpha_bar_prev[i]) / denom
    mean = (coeff_x0 * x0 + coeff_xt * xt).astype(np.float32)
    return mean, float(sched.beta_tilde[i])


class EpsModel(nn.Module):
    """Noise-prediction network: MLP over (flattened image, sinusoidal
    timestep embedding, learned class embedding). The embedding table has
    one extra row reserved for the null condition."""

    def __init__(self, image_shape, num_classes, rng, hidden=256, time_dim=32, cond_dim=32):
        self.image_shape = tuple(image_shape)
        self.num_classes = num_classes
        self.null_index = num_classes
        self.time_dim = time_dim
        d = int(np.prod(image_shape))
        self.cond_embed = nn.Embedding(num_classes + 1, cond_dim, rng, name="eps.cond")
        self.fc1 = nn.Linear(d + time_dim + cond_dim, hidden, rng, name="eps.fc1")
        self.fc2 = nn.Linear(hidden, hidden, rng, name="eps.fc2")
        self.fc3 = nn.Linear(hidden, d, rng, name="eps.fc3")
        # timestep-gated input skip: the noise estimate is dominated by a
        # t-dependent multiple of x_t, which a narrow MLP cannot represent
        self.skip_gate = nn.Linear(time_dim, 1, rng, name="eps.skip")

    def forward_train(self, xt, t, cond):
        """Taped forward for training. xt: (N, *image_shape) array."""
        n = len(xt)
        x = Tensor(np.asarray(xt, dtype=np.float32).reshape(n, -1))
        temb = Tensor(nn.sinusoidal_embedding(t, self.time_dim))
        cemb = self.cond_embed(np.asarray(cond, dtype=np.int64))
        h = nc.concat([x, temb, cemb], axis=1)
        h = nc.relu(self.fc1(h))
        h = nc.relu(self.fc2(h))
        gate = self.skip_gate(temb)
        out = nc.add(self.fc3(h), nc.mul(x, gate))
        return nc.reshape(out, (n,) + self.image_shape)

    def __call__(self, xt, t, cond):
        """Inference forward; returns a plain array of xt's shape."""
        xt = np.asarray(xt, dtype=np.float32)
        n = len(xt)
        t = np.broadcast_to(np.asarray(t), (n,))
        cond = np.broadcast_to(np.asarray(cond), (n,))
        return self.forward_train(xt, t, cond).data.reshape(xt.shape)


def lsimple_loss(model, x0_batch, conditions, sched: NoiseSchedule,
                 guidance: GuidanceConfig, rng):
    """Denoising score-matching loss: per-sample squared error between the
    drawn noise and the model's prediction, averaged over the batch. Each
    condition is independently replaced by the null token with probability
    guidance.drop_prob."""
    x0 = np.asarray(x0_batch, dtype=np.float32)
    if len(x0) == 0:
        raise ValueError("lsimple_loss: empty batch")
    n = len(x0)
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    ab = sched.alpha_bar[t - 1].reshape((n,) + (1,) * (x0.ndim - 1))
    xt = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)
    cond = np.asarray(conditions, dtype=np.int64).copy()
    drop = rng.random(n) < guidance.drop_prob
    cond[drop] = model.null_index
    pred = model.forward_train(xt, t, cond)
    diff = nc.sub(pred, Tensor(eps))
    return nc.mul(nc.tsum(nc.mul(diff, diff)), 1.0 / n)


def cfg_eps(model, xt, t, c, s):
    """Classifier-free-guided noise estimate:
    eps(null) + s * (eps(c) - eps(null)). s=0 and s=1 return the
    unconditional / conditional branch exactly."""
    if s < 0:
        raise ValueError(f"guidance scale must be >= 0, got {s}")
    if s == 0.0:
        return model(xt, t, model.null_index)
    if s == 1.0:
        return model(xt, t, c)
    eps_u = model(xt, t, model.null_index)
    eps_c = model(xt, t, c)
    return eps_u + s * (eps_c - eps_u)


def ancestral_step(model, xt, t, c, s, sched: NoiseSchedule, rng):
    """One reverse step x_t -> x_{t-1}; the final step (t=1) adds no noise."""
    sched.check_t(t)
    i = t - 1
    eps_hat = cfg_eps(model, xt, t, c, s)
    mean = (xt - sched.beta[i] / np.sqrt(1.0 - sched.alpha_bar[i]) * eps_hat) \
        / np.sqrt(sched.alpha[i])
    if t == 1:
        return mean.astype(np.float32)
    z = rng.standard_normal(np.shape(xt))
    return (mean + np.sqrt(sched.sigma2[i]) * z).astype(np.float32)


def sample(model, n, c, s, sched: NoiseSchedule, rng, image_shape=None):
    """Ancestral sampling from pure noise; deterministic given the rng state."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    shape = tuple(image_shape) if image_shape is not None else model.image_shape
    x = rng.standard_normal((n,) + shape).astype(np.float32)
    cond = np.broadcast_to(np.asarray(c), (n,))
    for t in range(sched.T, 0, -1):
        x = ancestral_step(model, x, t, cond, s, sched, rng)
    return x


def real_guided_sample(model, rgc: RealGuidanceConfig, c, s, sched: NoiseSchedule, rng):
    """Start the reverse chain at t* = round(rho*T) from a noised copy of the
    reference batch; rho=0 returns the references untouched."""
    ref = np.asarray(rgc.reference, dtype=np.float32)
    t_star = int(round(rgc.rho * sched.T))
    if t_star == 0:
        return ref.copy()
    ab = sched.alpha_bar[t_star - 1]
    eps = rng.standard_normal(ref.shape)
    x = (np.sqrt(ab) * ref + np.sqrt(1.0 - ab) * eps).astype(np.float32)
    cond = np.broadcast_to(np.asarray(c), (len(ref),))
    for t in range(t_star, 0, -1):
        x = ancestral_step(model, x, t, cond, s, sched, rng)
    return x


@dataclass
class DiffusionTrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 0.0
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)


def train_eps_model(model, images, labels, sched, cfg: DiffusionTrainConfig, rng):
    """Fit the noise-prediction network with AdamW and cosine decay.
    Returns the per-step loss history."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    lrs = LrSchedule(cfg.lr, cfg.steps, "cosine")
    history = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(images), size=min(cfg.batch_size, len(images)))
        loss = lsimple_loss(model, images[idx], labels[idx], sched, cfg.guidance, rng)
        nc.backward(loss)
        opt.step(lr=cosine_lr(step, lrs))
        history.append(loss.item())
    return history
