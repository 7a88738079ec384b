"""Small networks: noise predictor, classifier, domain-embedding encoder.

All three are sized for 1x16x16 inputs and use only per-sample operations
(no batch norm), so a batched forward pass equals stacking single-sample ones
and input gradients of summed per-sample losses are per-sample gradients.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from gda import container
from gda.schedule import NoiseSchedule, forward_diffuse, make_stream


class NumericalError(RuntimeError):
    """Non-finite value encountered in training or gradient evaluation."""


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class EpsilonPredictor(nn.Module):
    """Conv encoder-decoder with skips; time embedding enters at the bottleneck.

    ``feature_tap`` names the activation returned by :meth:`features`:
    ``"enc1"`` (16x16) or ``"enc2"`` (8x8, default).
    """

    def __init__(self, total_steps: int = 50, channels: int = 1, width: int = 32, mid: int = 40,
                 time_dim: int = 32, feature_tap: str = "enc2"):
        super().__init__()
        if feature_tap not in ("enc1", "enc2"):
            raise ValueError(f"unknown feature tap {feature_tap!r}")
        self.total_steps = total_steps
        self.time_dim = time_dim
        self.feature_tap = feature_tap
        self.enc1 = nn.Conv2d(channels, width, 3, padding=1)
        self.enc2 = nn.Conv2d(width, mid, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(mid, mid, 3, stride=2, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, mid), nn.SiLU(), nn.Linear(mid, mid))
        self.mid = nn.Conv2d(mid, mid, 3, padding=1)
        self.dec2 = nn.Conv2d(2 * mid, mid, 3, padding=1)
        self.dec1 = nn.Conv2d(mid + width, width, 3, padding=1)
        self.head = nn.Conv2d(width, channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _timesteps(self, t, n: int) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(n)
        if t.min() < 1 or t.max() > self.total_steps:
            raise ValueError(f"timestep outside [1, {self.total_steps}]")
        return t

    def _encode(self, x):
        h1 = F.silu(self.enc1(x))
        h2 = F.silu(self.enc2(h1))
        return h1, h2

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h1, h2 = self._encode(x)
        return h1 if self.feature_tap == "enc1" else h2

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        single = x.dim() == 3
        if single:
            x = x[None]
        if not torch.isfinite(x).all():
            raise NumericalError("non-finite input to noise predictor")
        tt = self._timesteps(t, x.shape[0])
        h1, h2 = self._encode(x)
        h3 = F.silu(self.enc3(h2))
        h3 = h3 + self.time_mlp(sinusoidal_embedding(tt, self.time_dim))[:, :, None, None]
        h3 = F.silu(self.mid(h3))
        u2 = F.interpolate(h3, scale_factor=2, mode="nearest")
        u2 = F.silu(self.dec2(torch.cat([u2, h2], dim=1)))
        u1 = F.interpolate(u2, scale_factor=2, mode="nearest")
        u1 = F.silu(self.dec1(torch.cat([u1, h1], dim=1)))
        out = self.head(u1)
        return out[0] if single else out


class Classifier(nn.Module):
    def __init__(self, class_count: int = 4, channels: int = 1, width: int = 16):
        super().__init__()
        self.class_count = class_count
        self.conv1 = nn.Conv2d(channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.conv3 = nn.Conv2d(2 * width, 4 * width, 3, padding=1)
        self.fc = nn.Linear(4 * width, class_count)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        single = x.dim() == 3
        if single:
            x = x[None]
        h = F.avg_pool2d(F.silu(self.conv1(x)), 2)
        h = F.avg_pool2d(F.silu(self.conv2(h)), 2)
        h = F.silu(self.conv3(h)).mean(dim=(2, 3))
        logits = self.fc(h)
        return logits[0] if single else logits


class EmbeddingEncoder(nn.Module):
    """Source-vs-shifted discriminator; its penultimate layer is the embedding."""

    def __init__(self, channels: int = 1, width: int = 16, dim: int = 32):
        super().__init__()
        self.dim = dim
        self.conv1 = nn.Conv2d(channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.conv3 = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        self.proj = nn.Linear(2 * width, dim)
        self.head = nn.Linear(dim, 1)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        single = x.dim() == 3
        if single:
            x = x[None]
        h = F.avg_pool2d(F.silu(self.conv1(x)), 2)
        h = F.avg_pool2d(F.silu(self.conv2(h)), 2)
        h = F.silu(self.conv3(h)).mean(dim=(2, 3))
        e = self.proj(h)
        return e[0] if single else e

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logit of 'x is from the source domain'."""
        return self.head(self.embed(x)).squeeze(-1)


def predict_eps(model: EpsilonPredictor, x: torch.Tensor, t: int) -> torch.Tensor:
    with torch.no_grad():
        return model(x, t)


def classify(model: Classifier, x: torch.Tensor) -> torch.Tensor:
    """Class probabilities (softmax over logits)."""
    return torch.softmax(model(x), dim=-1)


def grad_wrt_input(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Gradient of ``fn`` at ``x``.

    ``fn`` may return a scalar or a per-sample vector; vectors are summed, which
    yields per-sample gradients when samples do not interact.
    """
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        y = fn(x)
        y = torch.as_tensor(y)
        if not torch.isfinite(y).all():
            raise NumericalError("objective is non-finite")
        if not y.requires_grad:
            return torch.zeros_like(x)
        (g,) = torch.autograd.grad(y.sum(), x, allow_unused=True)
    if g is None:
        return torch.zeros_like(x)
    if not torch.isfinite(g).all():
        raise NumericalError("gradient is non-finite")
    return g


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 128
    lr: float = 2e-3
    seed: int = 0


@dataclass
class TrainReport:
    epochs: int
    final_loss: float
    loss_curve: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0
    metric: float | None = None

    def trailing_average_settled(self, window: int = 5, slack: float = 0.02) -> bool:
        """Last ``window``-epoch mean is no higher than the preceding window's (within ``slack``)."""
        c = np.asarray(self.loss_curve)
        if len(c) < 2 * window:
            return bool(c[-1] <= c[0]) if len(c) else True
        last, prev = c[-window:].mean(), c[-2 * window:-window].mean()
        return bool(last <= prev * (1 + slack))


def _fit(model: nn.Module, batch_loss: Callable, n: int, cfg: TrainConfig, label: str) -> TrainReport:
    if n == 0:
        raise ValueError(f"{label}: empty dataset")
    torch.manual_seed(cfg.seed)
    gen = make_stream(cfg.seed, label, "shuffle")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps_per_epoch, eta_min=cfg.lr * 0.02)
    curve = []
    t0 = time.perf_counter()
    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss = batch_loss(idx, gen)
            if not torch.isfinite(loss):
                raise NumericalError(f"{label}: loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(total / count)
    model.eval()
    return TrainReport(cfg.epochs, curve[-1], curve, time.perf_counter() - t0)


def train_denoiser(images: np.ndarray, sched: NoiseSchedule, cfg: TrainConfig,
                   **arch) -> tuple[EpsilonPredictor, TrainReport]:
    """Noise-prediction regression: minimise E||eps - eps_theta(x_t, t)||^2."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    torch.manual_seed(cfg.seed)
    model = EpsilonPredictor(total_steps=sched.total_steps, channels=x.shape[1], **arch)
    abar = torch.tensor(np.array(sched.alpha_bars), dtype=torch.float32)

    def batch_loss(idx, gen):
        x0 = x[idx]
        t = torch.randint(1, sched.total_steps + 1, (len(idx),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        a = abar[t - 1][:, None, None, None]
        xt = a.sqrt() * x0 + (1 - a).sqrt() * eps
        return F.mse_loss(model(xt, t), eps)

    report = _fit(model, batch_loss, len(x), cfg, "denoiser")
    return model, report


def denoiser_heldout_mse(model: EpsilonPredictor, images: np.ndarray, sched: NoiseSchedule, seed: int) -> float:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    gen = make_stream(seed, "heldout-mse")
    total = 0.0
    with torch.no_grad():
        for t in range(1, sched.total_steps + 1):
            eps = torch.randn(x.shape, generator=gen)
            total += F.mse_loss(model(forward_diffuse(x, t, eps, sched), t), eps).item()
    return total / sched.total_steps


def train_classifier(images: np.ndarray, labels: np.ndarray, cfg: TrainConfig, class_count: int = 4,
                     **arch) -> tuple[Classifier, TrainReport]:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    torch.manual_seed(cfg.seed)
    model = Classifier(class_count=class_count, channels=x.shape[1], **arch)
    report = _fit(model, lambda idx, gen: F.cross_entropy(model(x[idx]), y[idx]), len(x), cfg, "classifier")
    return model, report


def train_encoder(source: np.ndarray, shifted: np.ndarray, cfg: TrainConfig, **arch) -> tuple[EmbeddingEncoder, TrainReport]:
    x = torch.as_tensor(np.concatenate([source, shifted]), dtype=torch.float32)
    y = torch.cat([torch.ones(len(source)), torch.zeros(len(shifted))])
    torch.manual_seed(cfg.seed)
    model = EmbeddingEncoder(channels=x.shape[1], **arch)
    report = _fit(model, lambda idx, gen: F.binary_cross_entropy_with_logits(model(x[idx]), y[idx]),
                  len(x), cfg, "encoder")
    return model, report


def accuracy(model: Classifier, images: np.ndarray, labels: np.ndarray, batch: int = 512) -> float:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    preds = []
    with torch.no_grad():
        for i in range(0, len(x), batch):
            preds.append(model(x[i:i + batch]).argmax(-1))
    return float((torch.cat(preds).numpy() == np.asarray(labels)).mean())


def domain_accuracy(model: EmbeddingEncoder, source: np.ndarray, shifted: np.ndarray) -> float:
    with torch.no_grad():
        s = model(torch.as_tensor(source)) > 0
        o = model(torch.as_tensor(shifted)) <= 0
    return float(torch.cat([s, o]).float().mean())


def source_prototype(encoder: EmbeddingEncoder, images: np.ndarray) -> torch.Tensor:
    """Unit-normalised mean of unit-normalised source embeddings."""
    with torch.no_grad():
        e = F.normalize(encoder.embed(torch.as_tensor(np.asarray(images), dtype=torch.float32)), dim=-1)
    r = e.mean(dim=0)
    return r / r.norm()


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(model: nn.Module, path, extra: dict[str, np.ndarray] | None = None) -> None:
    records = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    for name, arr in (extra or {}).items():
        records[f"extra.{name}"] = np.asarray(arr)
    container.save(path, records)


def load_checkpoint(model: nn.Module, path) -> dict[str, np.ndarray]:
    """Load weights into ``model``; returns any ``extra.*`` records."""
    records = container.load(path)
    state = {k: torch.from_numpy(v.copy()) for k, v in records.items() if not k.startswith("extra.")}
    expected = model.state_dict()
    if set(state) != set(expected):
        raise container.ContainerError(f"checkpoint tensors do not match architecture: {sorted(set(state) ^ set(expected))}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise container.ContainerError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(expected[k].shape)}")
    model.load_state_dict(state)
    model.eval()
    return {k[len("extra."):]: v for k, v in records.items() if k.startswith("extra.")}


@dataclass
class NetsBundle:
    denoiser: EpsilonPredictor
    classifier: Classifier
    encoder: EmbeddingEncoder
    prototype: torch.Tensor

    def feature_fn(self, x: torch.Tensor) -> torch.Tensor:
        return self.denoiser.features(x)

    def freeze(self) -> "NetsBundle":
        for m in (self.denoiser, self.classifier, self.encoder):
            m.eval()
            m.requires_grad_(False)
        return self
