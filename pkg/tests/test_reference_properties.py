"""Measured properties of the reference run, pinned as regression bounds."""

import json

import numpy as np
import pytest
import torch

from gda import bench
from gda.sampler import gda_adapt_batch

# Measured on the frozen reference config.
MONOTONE_TAIL_FLOOR = 0.18     # measured 0.24
CLEAN_KEEP_FLOOR = 0.52        # measured 0.62
EXPECTED_FLOOR = 0.8


def _final_half_non_increasing(losses) -> bool:
    tail = list(losses)[len(losses) // 2:]
    return all(b <= a for a, b in zip(tail, tail[1:]))


@pytest.fixture(scope="module")
def corrupted_records(reference_ctx):
    ctx = reference_ctx
    entries = sorted(ctx.bench.manifest.shifted(), key=lambda e: e.sample_id)[:100]
    xs, _, ids = ctx.bench.arrays(entries)
    return gda_adapt_batch(torch.as_tensor(xs), ctx.bundle, ctx.guidance(), ctx.plan(), ctx.sched,
                           [ctx.sample_seed(s) for s in ids])


@pytest.fixture(scope="module")
def clean_records(reference_ctx):
    ctx = reference_ctx
    _, test, _ = bench.load_data(ctx.doc)
    x = torch.as_tensor(test.images[:200])
    return gda_adapt_batch(x, ctx.bundle, ctx.guidance(), ctx.plan(), ctx.sched,
                           [ctx.sample_seed(f"clean{i}") for i in range(200)])


def test_training_reports(reference_run):
    reps = json.loads((bench.out_dir(reference_run) / "checkpoints" / "train_reports.json").read_text())
    assert reps["denoiser"]["final_loss"] < 0.2
    assert reps["classifier"]["heldout_metric"] >= 0.95
    assert reps["encoder"]["heldout_metric"] >= 0.9
    assert all(r["trailing_average_settled"] for r in reps.values())
    assert sum(r["wall_seconds"] for r in reps.values()) <= 15 * 60


def test_guided_loss_tail_regression(corrupted_records):
    frac = np.mean([_final_half_non_increasing(r.per_step_loss) for r in corrupted_records])
    assert frac >= MONOTONE_TAIL_FLOOR


@pytest.mark.xfail(strict=True, reason="the guided loss oscillates late in the trajectory at this scale")
def test_guided_loss_tail_mostly_non_increasing(corrupted_records):
    frac = np.mean([_final_half_non_increasing(r.per_step_loss) for r in corrupted_records])
    assert frac >= EXPECTED_FLOOR


def test_clean_keep_original_regression(clean_records):
    assert np.mean([not r.filter_kept_adapted for r in clean_records]) >= CLEAN_KEEP_FLOOR


@pytest.mark.xfail(strict=True, reason="the round trip sharpens clean samples, so adapted entropy often wins")
def test_clean_samples_mostly_keep_original(clean_records):
    assert np.mean([not r.filter_kept_adapted for r in clean_records]) >= EXPECTED_FLOOR


def test_gda_beats_unadapted(reference_run):
    table = bench.ResultTable.from_csv((bench.out_dir(reference_run) / "results.csv").read_text())
    assert table.get("gda")["accuracy"] > table.get("standard")["accuracy"]
    row = table.get("gda")
    assert all(np.isfinite(float(row[c])) for c in ("accuracy", "mean_entropy_before", "mean_entropy_after"))


def test_entropy_report_medians(reference_run):
    s = bench.entropy_report(reference_run)
    assert s["clean/all"]["median"] < s["corrupted/all"]["median"]
    assert s["gda/all"]["median"] < s["corrupted/all"]["median"]


def test_timing_ordering(reference_run):
    t = bench.timing(reference_run)
    assert all(v > 0 and np.isfinite(v) for v in t.values())
    assert t["gda"] > t["gda_no_marginal"]
    assert t["diffpure"] > t["dda_10"] and t["diffpure"] > t["gda_no_marginal"]
