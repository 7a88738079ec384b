"""Reverse-time sampling, guided adaptation with confidence filtering, and baselines."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from gda.guidance import ChainBank, GuidanceConfig, build_augmentations, composite_guidance, sample_negatives, uncertainty
from gda.nets import NetsBundle, NumericalError
from gda.schedule import NoiseSchedule, derive_seed, forward_diffuse, make_stream

EpsModel = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class SamplerPlan:
    start_step: int = 50
    stride: int = 5
    mode: str = "ddim"
    guidance_scale: float = 1.0
    clamp_range: tuple[float, float] | None = (-1.2, 1.2)
    # When set, overrides ``stride`` with this many evenly spaced (rounded) transitions.
    num_steps: int | None = None
    redraw_chains: bool = False

    def __post_init__(self):
        if self.mode not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.num_steps is not None and not 1 <= self.num_steps <= self.start_step:
            raise ValueError(f"num_steps must lie in [1, start_step], got {self.num_steps}")
        if self.mode == "ddpm" and self.timesteps()[:-1] != list(range(self.start_step, 0, -1)):
            raise ValueError("ddpm mode cannot skip steps; use stride 1")

    def timesteps(self) -> list[int]:
        """Strictly decreasing visit sequence ``[start_step, ..., 0]``."""
        if self.num_steps is not None:
            ts = np.round(np.linspace(self.start_step, 0, self.num_steps + 1)).astype(int).tolist()
        else:
            ts = list(range(self.start_step, 0, -self.stride)) + [0]
        return ts

    def check(self, sched: NoiseSchedule) -> None:
        if not 1 <= self.start_step <= sched.total_steps:
            raise ValueError(f"start_step {self.start_step} outside [1, {sched.total_steps}]")


def predict_x0(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    sched.check_t(t)
    abar = sched.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)


def predict_x0_scaled(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Same estimate written as sqrt(1/abar) x_t - sqrt((1-abar)/abar) eps."""
    sched.check_t(t)
    abar = sched.alpha_bar(t)
    return math.sqrt(1.0 / abar) * x_t - math.sqrt((1.0 - abar) / abar) * eps_hat


def _noise_like(x: torch.Tensor, rng) -> torch.Tensor:
    if isinstance(rng, (list, tuple)):
        if x.dim() != 4 or len(rng) != x.shape[0]:
            raise ValueError("need one generator per batch row")
        return torch.stack([torch.randn(x.shape[1:], generator=g, dtype=x.dtype) for g in rng])
    return torch.randn(x.shape, generator=rng, dtype=x.dtype)


def _ddpm_update(x_t, eps_hat, t, sched, rng):
    sched.check_t(t)
    a, abar, sigma = sched.alpha(t), sched.alpha_bar(t), sched.sigma(t)
    mean = (x_t - (1.0 - a) / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(a)
    if sigma == 0.0 or t == 1:
        return mean
    return mean + sigma * _noise_like(x_t, rng)


def ddpm_step(x_t: torch.Tensor, t: int, model: EpsModel, sched: NoiseSchedule, rng=None) -> torch.Tensor:
    with torch.no_grad():
        eps_hat = model(x_t, t)
    return _ddpm_update(x_t, eps_hat, t, sched, rng)


def ddim_sigma(sched: NoiseSchedule, t: int, t_prev: int) -> float:
    """Zero for deterministic schedules; otherwise the eta=1 DDIM posterior scale."""
    if sched.deterministic or t_prev == 0:
        return 0.0
    ab, abp = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    return math.sqrt((1 - abp) / (1 - ab) * (1 - ab / abp))


def _ddim_update(x_t, eps_hat, t, t_prev, sched, rng, sigma=None):
    if not 0 <= t_prev < t <= sched.total_steps:
        raise ValueError(f"invalid DDIM step pair ({t}, {t_prev})")
    sigma = ddim_sigma(sched, t, t_prev) if sigma is None else float(sigma)
    abp = sched.alpha_bar(t_prev)
    if sigma ** 2 > 1.0 - abp:
        raise ValueError(f"sigma^2={sigma ** 2:.3g} exceeds 1 - alpha_bar(t_prev)={1 - abp:.3g}")
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    out = math.sqrt(abp) * x0_hat + math.sqrt(1.0 - abp - sigma ** 2) * eps_hat
    if sigma > 0:
        out = out + sigma * _noise_like(x_t, rng)
    return out, x0_hat


def ddim_step(x_t: torch.Tensor, t: int, t_prev: int, model: EpsModel, sched: NoiseSchedule, rng=None,
              sigma: float | None = None) -> torch.Tensor:
    with torch.no_grad():
        eps_hat = model(x_t, t)
    return _ddim_update(x_t, eps_hat, t, t_prev, sched, rng, sigma)[0]


def guided_step(x_t, t, t_prev, bundle: NetsBundle, cfg: GuidanceConfig, plan: SamplerPlan, x_ref,
                chains, sched: NoiseSchedule, rng=None, negatives=None) -> tuple[torch.Tensor, torch.Tensor]:
    """One reverse transition followed by the guidance correction.

    The objective is evaluated at the denoised estimate and its gradient is
    subtracted from the sampled next latent (descent on the objective).
    Returns the next latent and the per-sample objective value.
    """
    with torch.no_grad():
        eps_hat = bundle.denoiser(x_t, t)
    if plan.mode == "ddim":
        x_prev, x0_hat = _ddim_update(x_t, eps_hat, t, t_prev, sched, rng)
    else:
        if t_prev != t - 1:
            raise ValueError("ddpm mode steps one timestep at a time")
        x_prev = _ddpm_update(x_t, eps_hat, t, sched, rng)
        x0_hat = predict_x0(x_t, t, eps_hat, sched)
    lm, ls, lc = cfg.weights
    batch_shape = x_t.shape[0] if x_t.dim() == 4 else ()
    if plan.guidance_scale == 0 or (lm == 0 and ls == 0 and lc == 0):
        return x_prev, torch.zeros(batch_shape)
    loss, grad = composite_guidance(bundle, cfg, x0_hat, x_ref, chains, negatives)
    x_prev = x_prev - plan.guidance_scale * grad
    if plan.clamp_range is not None:
        x_prev = x_prev.clamp(*plan.clamp_range)
    return x_prev, loss


# -- records -----------------------------------------------------------------

@dataclass
class AdaptationRecord:
    original: torch.Tensor
    adapted: torch.Tensor
    chosen: torch.Tensor
    entropy_original: float
    entropy_adapted: float
    filter_kept_adapted: bool
    prediction: int
    per_step_loss: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0
    filter_applied: bool = True
    failed: bool = False
    diagnostic: str = ""

    @property
    def entropy_chosen(self) -> float:
        return self.entropy_adapted if self.filter_kept_adapted else self.entropy_original


def _finish(x0s, adapted, bundle_classifier, losses, wall, filter_applied, failed=None, diagnostics=None):
    h_orig = uncertainty(bundle_classifier, x0s)
    h_adapt = uncertainty(bundle_classifier, adapted)
    records = []
    for i in range(x0s.shape[0]):
        bad = bool(failed[i]) if failed is not None else False
        if bad:
            keep = False
        elif filter_applied:
            keep = bool(h_adapt[i] < h_orig[i])
        else:
            keep = True
        chosen = adapted[i] if keep else x0s[i]
        with torch.no_grad():
            pred = int(bundle_classifier(chosen[None]).argmax(-1)[0])
        records.append(AdaptationRecord(
            original=x0s[i], adapted=adapted[i], chosen=chosen,
            entropy_original=float(h_orig[i]), entropy_adapted=float(h_adapt[i]),
            filter_kept_adapted=keep, prediction=pred,
            per_step_loss=[float(step[i]) for step in losses], wall_seconds=wall,
            filter_applied=filter_applied, failed=bad,
            diagnostic=(diagnostics or {}).get(i, ""),
        ))
    return records


def _sample_seeds(seeds, n):
    if isinstance(seeds, int):
        return [derive_seed(seeds, i) for i in range(n)]
    seeds = list(seeds)
    if len(seeds) != n:
        raise ValueError("need one seed per sample")
    return seeds


def _diffuse(x0s, t_star, sched, seeds):
    eps = torch.stack([torch.randn(x0s.shape[1:], generator=make_stream(s, "forward")) for s in seeds])
    return forward_diffuse(x0s, t_star, eps, sched)


def gda_adapt_batch(x0s: torch.Tensor, bundle: NetsBundle, cfg: GuidanceConfig, plan: SamplerPlan,
                    sched: NoiseSchedule, seeds) -> list[AdaptationRecord]:
    """Diffuse, guided reverse process, confidence filter; one record per sample.

    ``seeds`` holds one integer per sample; every random draw of sample ``i``
    (forward noise, reverse noise, augmentation chains) derives from ``seeds[i]``,
    so results do not depend on batch composition order.
    """
    plan.check(sched)
    t0 = time.perf_counter()
    x0s = torch.as_tensor(x0s, dtype=torch.float32)
    n = x0s.shape[0]
    seeds = _sample_seeds(seeds, n)
    shape = tuple(x0s.shape[1:])
    chain_rngs = [np.random.default_rng(derive_seed(s, "chains")) for s in seeds]
    reverse_rngs = [make_stream(s, "reverse") for s in seeds]

    def draw_bank():
        if cfg.aug_count == 0 or cfg.weights[0] == 0:
            return None
        return ChainBank.stack([build_augmentations(cfg, r, shape) for r in chain_rngs], shape)

    rows, cols = cfg.patch_grid
    negatives = None
    if cfg.negatives_per_patch < rows * cols - 1 and n:
        negatives = torch.stack([sample_negatives(rows * cols, cfg.negatives_per_patch,
                                                  np.random.default_rng(derive_seed(s, "negatives")))
                                 for s in seeds])
    bank = draw_bank()
    x = _diffuse(x0s, plan.start_step, sched, seeds)
    ts = plan.timesteps()
    losses = []
    failed = torch.zeros(n, dtype=torch.bool)
    diagnostics: dict[int, str] = {}
    for step, (t, t_prev) in enumerate(zip(ts[:-1], ts[1:])):
        if plan.redraw_chains and step > 0:
            bank = draw_bank()
        try:
            x_next, loss = guided_step(x, t, t_prev, bundle, cfg, plan, x0s, bank, sched, reverse_rngs, negatives)
        except NumericalError:
            x_next, loss = _guided_step_isolating(x, t, t_prev, bundle, cfg, plan, x0s, bank, sched,
                                                  reverse_rngs, negatives, failed, diagnostics)
        if __debug__ and step == 0:
            with torch.no_grad():
                e = bundle.denoiser(x, t)
            assert torch.allclose(predict_x0(x, t, e, sched), predict_x0_scaled(x, t, e, sched), atol=1e-5)
        x = torch.where(failed[:, None, None, None], x, x_next)
        losses.append(loss.detach())
    wall = (time.perf_counter() - t0) / max(n, 1)
    return _finish(x0s, x, bundle.classifier, losses, wall, True, failed, diagnostics)


def _guided_step_isolating(x, t, t_prev, bundle, cfg, plan, x0s, bank, sched, rngs, negatives, failed, diagnostics):
    """Per-sample fallback when the batched guidance hits a non-finite value."""
    outs, losses = [], []
    for i in range(x.shape[0]):
        sub_bank = None
        if bank is not None:
            sub_bank = ChainBank(*(getattr(bank, a)[i:i + 1] for a in
                                   ("theta", "is_affine", "bright", "contrast", "noise", "flip", "weights")))
        try:
            xi, li = guided_step(x[i:i + 1], t, t_prev, bundle, cfg, plan, x0s[i:i + 1], sub_bank, sched,
                                 [rngs[i]], None if negatives is None else negatives[i:i + 1])
        except NumericalError as exc:
            failed[i] = True
            diagnostics[i] = f"step t={t}: {exc}"
            xi, li = x[i:i + 1], torch.full((1,), float("nan"))
        outs.append(xi)
        losses.append(li)
    return torch.cat(outs), torch.cat(losses)


def gda_adapt(x0: torch.Tensor, bundle: NetsBundle, cfg: GuidanceConfig, plan: SamplerPlan,
              sched: NoiseSchedule, seed: int) -> AdaptationRecord:
    return gda_adapt_batch(x0[None], bundle, cfg, plan, sched, [seed])[0]


def low_pass(x: torch.Tensor, scale_factor: int) -> torch.Tensor:
    """Average-pool downsample then bilinear upsample back to the input size."""
    xb = x[None] if x.dim() == 3 else x
    h, w = xb.shape[-2:]
    if scale_factor < 2 or h % scale_factor or w % scale_factor:
        raise ValueError(f"scale factor {scale_factor} must be >= 2 and divide {h}x{w}")
    out = F.interpolate(F.avg_pool2d(xb, scale_factor), size=(h, w), mode="bilinear", align_corners=False)
    return out[0] if x.dim() == 3 else out


def dda_baseline_batch(x0s: torch.Tensor, model: EpsModel, sched: NoiseSchedule, plan: SamplerPlan, seeds,
                       scale_factor: int = 4, weight: float = 1.0, ensemble: bool = False,
                       classifier=None) -> list[AdaptationRecord]:
    """Reverse process with low-pass latent refinement toward the input."""
    plan.check(sched)
    if classifier is None:
        raise ValueError("a classifier is required to score records")
    t0 = time.perf_counter()
    x0s = torch.as_tensor(x0s, dtype=torch.float32)
    seeds = _sample_seeds(seeds, x0s.shape[0])
    rngs = [make_stream(s, "reverse") for s in seeds]
    target = low_pass(x0s, scale_factor)
    x = _diffuse(x0s, plan.start_step, sched, seeds)
    ts = plan.timesteps()
    for t, t_prev in zip(ts[:-1], ts[1:]):
        with torch.no_grad():
            eps_hat = model(x, t)
        x, x0_hat = _ddim_update(x, eps_hat, t, t_prev, sched, rngs)
        if weight != 0:
            x = x + weight * (target - low_pass(x0_hat, scale_factor))
    wall = (time.perf_counter() - t0) / max(x0s.shape[0], 1)
    return _finish(x0s, x, classifier, [], wall, ensemble)


def diffpure_baseline_batch(x0s: torch.Tensor, model: EpsModel, sched: NoiseSchedule, t_star: int, seeds,
                            classifier=None) -> list[AdaptationRecord]:
    """Diffuse to ``t_star`` then run the plain DDPM reverse chain to 0."""
    sched.check_t(t_star)
    if classifier is None:
        raise ValueError("a classifier is required to score records")
    t0 = time.perf_counter()
    x0s = torch.as_tensor(x0s, dtype=torch.float32)
    seeds = _sample_seeds(seeds, x0s.shape[0])
    rngs = [make_stream(s, "reverse") for s in seeds]
    x = _diffuse(x0s, t_star, sched, seeds)
    for t in range(t_star, 0, -1):
        x = ddpm_step(x, t, model, sched, rngs)
    wall = (time.perf_counter() - t0) / max(x0s.shape[0], 1)
    return _finish(x0s, x, classifier, [], wall, False)


def dda_baseline_adapt(x0, model, sched, plan, seed: int, scale_factor: int = 4, classifier=None, **kw):
    return dda_baseline_batch(x0[None], model, sched, plan, [seed], scale_factor, classifier=classifier, **kw)[0]


def diffpure_baseline_adapt(x0, model, sched, t_star: int, seed: int, classifier=None):
    return diffpure_baseline_batch(x0[None], model, sched, t_star, [seed], classifier=classifier)[0]


def standard_records(x0s: torch.Tensor, classifier) -> list[AdaptationRecord]:
    """No adaptation: the chosen sample is always the input."""
    x0s = torch.as_tensor(x0s, dtype=torch.float32)
    recs = _finish(x0s, x0s, classifier, [], 0.0, False)
    for r in recs:
        r.filter_kept_adapted = False
        r.chosen = r.original
    return recs
