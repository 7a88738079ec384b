"""Acceptance suite: one test per criterion, thresholds pinned.

Criteria 5-10 share the session-scoped reference run (gen-data -> train ->
adapt with the packaged reference config); criterion 6 runs it a second time.
"""

import copy
import csv
import filecmp
import math

import numpy as np
import pytest
import torch

from gda import bench
from gda.guidance import (ChainBank, GuidanceConfig, build_augmentations, composite_guidance, entropy,
                          identity_chain, marginal_entropy, uncertainty)
from gda.nets import Classifier, NetsBundle
from gda.sampler import SamplerPlan, _ddim_update, gda_adapt_batch, predict_x0
from gda.schedule import build_schedule, forward_diffuse, make_stream

from conftest import run_reference_pipeline

LOG4 = math.log(4)

# Pinned thresholds.
INVERSION_TOL = 1e-5
MC_SIGMAS = 4.0
MC_DRAWS = 100_000
GRAD_TOL = {torch.float32: 1e-2, torch.float64: 1e-4}
GRAD_COORDS = 64
FILTER_SAMPLES = 500
GAIN_POINTS = 0.05
DDIM_TOL = 1e-5


def _table(doc):
    return bench.ResultTable.from_csv((bench.out_dir(doc) / "results.csv").read_text())


# 1 ---------------------------------------------------------------------------

def test_01_exact_inversion():
    sched = build_schedule()
    gen = torch.Generator().manual_seed(0)
    x0 = torch.rand(100, 1, 16, 16, generator=gen) * 2 - 1
    eps = torch.randn(x0.shape, generator=gen)
    worst = max(float((predict_x0(forward_diffuse(x0, t, eps, sched), t, eps, sched) - x0).abs().max())
                for t in range(1, 51))
    assert worst <= INVERSION_TOL


# 2 ---------------------------------------------------------------------------

def test_02_forward_marginal_statistics():
    sched = build_schedule()
    x0 = torch.linspace(-1, 1, 64, dtype=torch.float64).reshape(1, 8, 8)
    gen = make_stream(0, "forward-marginal")
    for t in (1, 25, 50):
        ab = sched.alpha_bar(t)
        total = torch.zeros_like(x0)
        total_sq = torch.zeros_like(x0)
        for _ in range(MC_DRAWS // 10_000):
            eps = torch.randn((10_000,) + tuple(x0.shape), generator=gen, dtype=torch.float64)
            xt = forward_diffuse(x0.expand_as(eps), t, eps, sched)
            total += xt.sum(0)
            total_sq += (xt ** 2).sum(0)
        n = MC_DRAWS
        mean = total / n
        var = (total_sq - n * mean ** 2) / (n - 1)
        true_var = 1 - ab
        mean_se = math.sqrt(true_var / n)
        var_se = true_var * math.sqrt(2 / (n - 1))
        assert float((mean - math.sqrt(ab) * x0).abs().max()) <= MC_SIGMAS * mean_se, t
        assert float((var - true_var).abs().max()) <= MC_SIGMAS * var_se, t


# 3 ---------------------------------------------------------------------------

def _as_dtype(bundle: NetsBundle, dtype) -> NetsBundle:
    return NetsBundle(copy.deepcopy(bundle.denoiser).to(dtype), copy.deepcopy(bundle.classifier).to(dtype),
                      copy.deepcopy(bundle.encoder).to(dtype), bundle.prototype.to(dtype)).freeze()


GRAD_CASES = {
    "marginal": dict(lambda_marginal=1.0, lambda_style=0.0, lambda_content=0.0),
    "style": dict(lambda_marginal=0.0, lambda_style=1.0, lambda_content=0.0),
    "content": dict(lambda_marginal=0.0, lambda_style=0.0, lambda_content=1.0),
    "weighted_sum": dict(lambda_marginal=100.0, lambda_style=5000.0, lambda_content=1500.0, lambda_scale=1e-3),
}


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64], ids=["single", "double"])
def test_03_gradient_fidelity(reference_ctx, dtype):
    ctx = reference_ctx
    entries = sorted(ctx.bench.manifest.shifted(), key=lambda e: e.sample_id)[:2]
    xs, _, _ = ctx.bench.arrays(entries)
    x_ref = torch.as_tensor(xs[:1])
    x_gen = torch.as_tensor(xs[1:2])
    truth = _as_dtype(ctx.bundle, torch.float64)
    test = _as_dtype(ctx.bundle, dtype)
    coords = np.random.default_rng(0).choice(x_gen.numel(), GRAD_COORDS, replace=False)
    h = 1e-5
    for name, weights in GRAD_CASES.items():
        cfg = GuidanceConfig(aug_count=4, style_prototype=None, **weights)
        bank = ChainBank.stack([build_augmentations(cfg, np.random.default_rng(1), tuple(x_gen.shape[1:]))],
                               tuple(x_gen.shape[1:]))
        _, g = composite_guidance(test, cfg, x_gen.to(dtype), x_ref.to(dtype), bank)
        g = g.double().flatten()
        xd, rd = x_gen.double(), x_ref.double()
        fd = np.empty(GRAD_COORDS)
        for j, i in enumerate(coords):
            e = torch.zeros(xd.numel(), dtype=torch.float64)
            e[i] = h
            e = e.reshape(xd.shape)
            lp, _ = composite_guidance(truth, cfg, xd + e, rd, bank)
            lm, _ = composite_guidance(truth, cfg, xd - e, rd, bank)
            fd[j] = float(lp.sum() - lm.sum()) / (2 * h)
        ad = g[coords].numpy()
        rel = np.abs(ad - fd).max() / np.abs(fd).max()
        assert rel <= GRAD_TOL[dtype], (name, rel)


# 4 ---------------------------------------------------------------------------

def test_04_entropy_bounds_and_identities(reference_ctx):
    ctx = reference_ctx
    assert float(entropy(torch.full((4,), 0.25, dtype=torch.float64))) == LOG4
    assert float(entropy(torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64))) == 0.0
    flat = Classifier()
    for p in flat.parameters():
        torch.nn.init.zeros_(p)
    assert float(uncertainty(flat, torch.zeros(1, 16, 16))) == LOG4

    xs, _, _ = ctx.bench.arrays(ctx.bench.manifest.entries)
    x = torch.as_tensor(xs)
    h = uncertainty(ctx.bundle.classifier, x)
    assert bool((h >= 0).all() and (h <= LOG4).all())
    extreme = uncertainty(ctx.bundle.classifier, torch.cat([x[:50] * 100, x[:50] * -100]))
    assert bool((extreme >= 0).all() and (extreme <= LOG4).all())

    chains = build_augmentations(GuidanceConfig(aug_count=1), np.random.default_rng(0))
    view = chains[0].apply(x[:64])
    single = entropy(torch.softmax(ctx.bundle.classifier(view), dim=-1))
    assert torch.equal(marginal_entropy(ctx.bundle.classifier, x[:64], chains * 4), single)
    marg = marginal_entropy(ctx.bundle.classifier, x[:64], [identity_chain(2)] * 4)
    assert bool((marg >= 0).all() and (marg <= LOG4).all())

    for method in bench.METHODS:
        for r in bench.read_records(bench.out_dir(ctx.doc) / "adapt" / method / "records.csv"):
            for key in ("entropy_original", "entropy_adapted", "entropy_chosen"):
                assert 0.0 <= float(r[key]) <= LOG4


# 5 ---------------------------------------------------------------------------

def test_05_confidence_filter_minimality(reference_ctx):
    ctx = reference_ctx
    entries = sorted(ctx.bench.manifest.shifted(), key=lambda e: e.sample_id)[:FILTER_SAMPLES]
    xs, _, ids = ctx.bench.arrays(entries)
    recs = gda_adapt_batch(torch.as_tensor(xs), ctx.bundle, ctx.guidance(), ctx.plan(), ctx.sched,
                           [ctx.sample_seed(s) for s in ids])
    assert len(recs) == FILTER_SAMPLES
    for r in recs:
        assert r.entropy_chosen == min(r.entropy_adapted, r.entropy_original)
        assert torch.equal(r.chosen, r.adapted) or torch.equal(r.chosen, r.original)
        assert torch.equal(r.chosen, r.adapted if r.filter_kept_adapted else r.original)


# 6 ---------------------------------------------------------------------------

def test_06_determinism(reference_run, tmp_path_factory):
    first = bench.out_dir(reference_run)
    second = bench.out_dir(run_reference_pipeline(tmp_path_factory.mktemp("rerun") / "run"))
    names = sorted(p.relative_to(first) for p in first.rglob("*.csv")
                   if p.parent.name in bench.METHODS or p.name == "results.csv")
    assert len(names) == len(bench.METHODS) + 1
    for rel in names:
        assert filecmp.cmp(first / rel, second / rel, shallow=False), rel
    for ck in bench.CHECKPOINTS:
        assert filecmp.cmp(first / "checkpoints" / ck, second / "checkpoints" / ck, shallow=False), ck


# 7 ---------------------------------------------------------------------------

def test_07_adaptation_gain_and_ordering(reference_run):
    table = _table(reference_run)
    acc = {m: table.get(m)["accuracy"] for m in bench.METHODS}
    assert table.get("gda")["n"] == 800
    assert acc["gda"] - acc["standard"] >= GAIN_POINTS, acc
    assert acc["gda"] >= acc["gda_no_marginal"] >= min(acc["dda"], acc["diffpure"]), acc


# 8 ---------------------------------------------------------------------------

def test_08_entropy_shift(reference_run):
    summary = bench.entropy_report(reference_run)
    gda = [float(r["entropy_adapted"])
           for r in bench.read_records(bench.out_dir(reference_run) / "adapt" / "gda" / "records.csv")]
    assert summary["gda/all"]["median"] == pytest.approx(float(np.median(gda)))
    assert summary["gda/all"]["median"] < summary["corrupted/all"]["median"]


# 9 ---------------------------------------------------------------------------

def test_09_step_sweep(reference_run):
    acc = bench.sweep_steps(reference_run)
    assert acc[("gda", 10)] >= acc[("gda", 1)]
    assert acc[("gda", 10)] >= acc[("dda", 10)]
    assert acc[("gda", 10)] == _table(reference_run).get("gda")["accuracy"]


# 10 --------------------------------------------------------------------------

def test_10_augmentation_sweep(reference_run):
    acc = bench.sweep_augs(reference_run)
    assert acc[16] >= acc[0]
    with open(bench.out_dir(reference_run) / "sweeps" / "augs.csv") as fh:
        rows = {r["aug_count"]: r["accuracy"] for r in csv.DictReader(fh)}
    assert rows["0"] == rows["gda_no_marginal"]
    assert float(rows["gda_no_marginal"]) == _table(reference_run).get("gda_no_marginal")["accuracy"]


# 11 --------------------------------------------------------------------------

def test_11_ddim_trajectory_consistency():
    sched = build_schedule()
    gen = torch.Generator().manual_seed(3)
    x0 = torch.rand(8, 1, 16, 16, generator=gen) * 2 - 1
    eps = torch.randn(x0.shape, generator=gen)

    def oracle(x_t, t):
        ab = sched.alpha_bar(t)
        return (x_t - math.sqrt(ab) * x0) / math.sqrt(1 - ab)

    def step(x, t, tp):
        return _ddim_update(x, oracle(x, t), t, tp, sched, None, sigma=0.0)

    x_T = forward_diffuse(x0, 50, eps, sched)
    for t_mid, t_prev in ((30, 10), (45, 44), (20, 1), (25, 0)):
        composed = step(step(x_T, 50, t_mid)[0], t_mid, t_prev)[0]
        direct = step(x_T, 50, t_prev)[0]
        assert float((composed - direct).abs().max()) <= DDIM_TOL
    end, x0_hat = step(x_T, 50, 0)
    assert torch.equal(end, x0_hat)
    assert float((end - x0).abs().max()) <= DDIM_TOL
    plan = SamplerPlan(stride=1)
    x = x_T
    for t, tp in zip(plan.timesteps()[:-1], plan.timesteps()[1:]):
        x = step(x, t, tp)[0]
    assert float((x - x0).abs().max()) <= DDIM_TOL
