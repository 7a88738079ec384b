"""Experiment orchestration: data generation, training, adaptation runs, sweeps and reports.

Every output is a pure function of the resolved config (seeded), except
wall-clock columns, which only the timing report writes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from gda import config as C
from gda import shiftgen as sg
from gda.container import ContainerError
from gda.guidance import GuidanceConfig, composite_guidance
from gda.nets import (Classifier, EmbeddingEncoder, EpsilonPredictor, NetsBundle, NumericalError, TrainReport,
                      accuracy, denoiser_heldout_mse, domain_accuracy, load_checkpoint, save_checkpoint,
                      source_prototype, train_classifier, train_denoiser, train_encoder)
from gda.sampler import (AdaptationRecord, SamplerPlan, dda_baseline_batch, diffpure_baseline_batch,
                         gda_adapt_batch, predict_x0, standard_records)
from gda.schedule import derive_seed, forward_diffuse, make_stream

log = logging.getLogger(__name__)

METHODS = ("standard", "diffpure", "dda", "gda_no_marginal", "gda")
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 1, 2, 3


class MissingArtifact(RuntimeError):
    pass


def out_dir(doc: dict) -> Path:
    return Path(doc["output_dir"])


def write_resolved(doc: dict) -> Path:
    path = out_dir(doc) / "resolved_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(C.dumps(doc))
    return path


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


# -- data --------------------------------------------------------------------

def encoder_shift_set(data: sg.Dataset, seed: int) -> np.ndarray:
    """Every family and severity, cycled over ``data``: the 'not source' class for the encoder."""
    fams = sg.CORRUPTIONS + sg.STYLES
    out = np.empty_like(data.images)
    for i, sid in enumerate(data.ids):
        shift = sg.ShiftSpec(fams[i % len(fams)], 1 + (i // len(fams)) % 5)
        out[i] = sg.apply_shift(data.images[i], shift, np.random.default_rng(derive_seed(seed, "encoder-shift", sid)))
    return out


def gen_data(doc: dict) -> dict:
    root = out_dir(doc) / "data"
    seed = int(doc["master_seed"])
    spec = C.source_spec_from(doc)
    train = sg.generate_source(spec, "train", seed)
    test = sg.generate_source(spec, "test", seed)
    sg.save_dataset(train, root / "source_train.gdac")
    sg.save_dataset(test, root / "source_test.gdac")
    shifts = C.shifts_from(doc)
    bench = sg.build_benchmark(test, shifts, int(doc["shift"]["n_per_shift"]), seed)
    sg.save_benchmark(bench, root)
    for shift in shifts:
        xs, _, _ = bench.arrays(bench.groups()[(shift.family, shift.severity)][:40])
        sg.write_audit_sheet(root / "audit" / f"{shift.name}.pgm", xs)
    write_resolved(doc)
    return {"train": len(train), "test": len(test), "benchmark_entries": len(bench.manifest)}


def load_data(doc: dict):
    root = out_dir(doc) / "data"
    try:
        train = sg.load_dataset(root / "source_train.gdac")
        test = sg.load_dataset(root / "source_test.gdac")
        bench = sg.load_benchmark(root / "benchmark.manifest")
    except FileNotFoundError as exc:
        raise MissingArtifact(f"missing data artifact ({exc.filename}); run gen-data first") from exc
    return train, test, bench


# -- training ----------------------------------------------------------------

CHECKPOINTS = ("denoiser.gdac", "classifier.gdac", "encoder.gdac")


def train(doc: dict) -> dict[str, TrainReport]:
    """Train the three networks; checkpoints are written only after all succeed."""
    train_set, test_set, _ = load_data(doc)
    sched = C.schedule_from(doc)
    seed = int(doc["master_seed"])
    den, den_rep = train_denoiser(train_set.images, sched, C.train_config_from(doc, "denoiser"),
                                  **C.arch_from(doc, "denoiser"))
    den_rep.metric = denoiser_heldout_mse(den, test_set.images, sched, seed)
    clf, clf_rep = train_classifier(train_set.images, train_set.labels, C.train_config_from(doc, "classifier"),
                                    **C.arch_from(doc, "classifier"))
    clf_rep.metric = accuracy(clf, test_set.images, test_set.labels)
    enc, enc_rep = train_encoder(train_set.images, encoder_shift_set(train_set, seed),
                                 C.train_config_from(doc, "encoder"), **C.arch_from(doc, "encoder"))
    enc_rep.metric = domain_accuracy(enc, test_set.images, encoder_shift_set(test_set, seed))
    proto = source_prototype(enc, train_set.images)
    ck = out_dir(doc) / "checkpoints"
    save_checkpoint(den, ck / "denoiser.gdac")
    save_checkpoint(clf, ck / "classifier.gdac")
    save_checkpoint(enc, ck / "encoder.gdac", extra={"style_prototype": proto.numpy()})
    reports = {"denoiser": den_rep, "classifier": clf_rep, "encoder": enc_rep}
    _atomic_write(ck / "train_reports.json", json.dumps(
        {k: {"epochs": r.epochs, "final_loss": r.final_loss, "loss_curve": r.loss_curve,
             "wall_seconds": r.wall_seconds, "heldout_metric": r.metric,
             "trailing_average_settled": r.trailing_average_settled()} for k, r in reports.items()},
        indent=2) + "\n")
    write_resolved(doc)
    return reports


def load_bundle(doc: dict) -> NetsBundle:
    ck = out_dir(doc) / "checkpoints"
    missing = [name for name in CHECKPOINTS if not (ck / name).exists()]
    if missing:
        raise MissingArtifact(f"missing checkpoints {missing} in {ck}; run train first")
    den = EpsilonPredictor(total_steps=int(doc["diffusion"]["total_steps"]), **C.arch_from(doc, "denoiser"))
    clf = Classifier(**C.arch_from(doc, "classifier"))
    enc = EmbeddingEncoder(**C.arch_from(doc, "encoder"))
    load_checkpoint(den, ck / "denoiser.gdac")
    load_checkpoint(clf, ck / "classifier.gdac")
    extra = load_checkpoint(enc, ck / "encoder.gdac")
    if "style_prototype" not in extra:
        raise ContainerError("encoder checkpoint lacks the style prototype")
    proto = torch.as_tensor(extra["style_prototype"], dtype=torch.float32)
    proto = proto / proto.norm()
    return NetsBundle(den, clf, enc, proto).freeze()


# -- adaptation --------------------------------------------------------------

@dataclass
class Context:
    doc: dict
    bundle: NetsBundle
    bench: sg.Benchmark
    sched: object = None

    def __post_init__(self):
        if self.sched is None:
            self.sched = C.schedule_from(self.doc)

    @classmethod
    def load(cls, doc: dict) -> "Context":
        bundle = load_bundle(doc)
        _, _, bench = load_data(doc)
        return cls(doc, bundle, bench)

    def guidance(self, **overrides) -> GuidanceConfig:
        return C.guidance_from(self.doc, self.bundle.prototype, **overrides)

    def plan(self, **overrides) -> SamplerPlan:
        return C.plan_from(self.doc, **overrides)

    def sample_seed(self, sample_id: str) -> int:
        return derive_seed(int(self.doc["master_seed"]), "adapt", sample_id)


def run_method(ctx: Context, method: str, entries: list[sg.ManifestEntry] | None = None,
               plan_overrides: dict | None = None, guidance_overrides: dict | None = None,
               ) -> list[tuple[sg.ManifestEntry, AdaptationRecord]]:
    """Adapt ``entries`` (default: every shifted benchmark entry) in sorted, fixed-size batches."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    entries = sorted(entries if entries is not None else ctx.bench.manifest.shifted(), key=lambda e: e.sample_id)
    plan = ctx.plan(**(plan_overrides or {}))
    b = ctx.doc["bench"]
    out = []
    bs = int(b["batch_size"])
    for i in range(0, len(entries), bs):
        chunk = entries[i:i + bs]
        xs, _, ids = ctx.bench.arrays(chunk)
        x = torch.as_tensor(xs)
        seeds = [ctx.sample_seed(s) for s in ids]
        if method == "standard":
            recs = standard_records(x, ctx.bundle.classifier)
        elif method == "diffpure":
            recs = diffpure_baseline_batch(x, ctx.bundle.denoiser, ctx.sched, int(b["diffpure_t_star"]), seeds,
                                           classifier=ctx.bundle.classifier)
        elif method == "dda":
            recs = dda_baseline_batch(x, ctx.bundle.denoiser, ctx.sched, plan, seeds,
                                      scale_factor=int(b["dda_scale_factor"]), weight=float(b["dda_weight"]),
                                      classifier=ctx.bundle.classifier)
        else:
            overrides = dict(guidance_overrides or {})
            if method == "gda_no_marginal":
                overrides["lambda_marginal"] = 0.0
            recs = gda_adapt_batch(x, ctx.bundle, ctx.guidance(**overrides), plan, ctx.sched, seeds)
        out.extend(zip(chunk, recs))
    return out


RECORD_COLUMNS = ("sample_id", "clean_id", "family", "severity", "label", "method", "prediction", "correct",
                  "entropy_original", "entropy_adapted", "entropy_chosen", "filter_applied",
                  "filter_kept_adapted", "failed", "steps", "final_step_loss", "mean_step_loss", "diagnostic")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_csv(method: str, rows: list[tuple[sg.ManifestEntry, AdaptationRecord]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for e, r in rows:
        losses = r.per_step_loss
        w.writerow([_fmt(v) for v in (
            e.sample_id, e.clean_id, e.family, e.severity, e.label, method, r.prediction, r.prediction == e.label,
            r.entropy_original, r.entropy_adapted, r.entropy_chosen, r.filter_applied, r.filter_kept_adapted,
            r.failed, len(losses), float(losses[-1]) if losses else 0.0,
            float(np.mean(losses)) if losses else 0.0, r.diagnostic)])
    return buf.getvalue()


def read_records(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- result table ------------------------------------------------------------

TABLE_COLUMNS = ("method", "family", "severity", "n", "accuracy", "mean_entropy_before", "mean_entropy_after",
                 "keep_rate", "mean_wall_seconds")


@dataclass
class ResultTable:
    rows: list[dict] = field(default_factory=list)

    @staticmethod
    def summarize(method: str, rows: list[tuple[sg.ManifestEntry, AdaptationRecord]]) -> list[dict]:
        groups: dict[tuple[str, int], list] = {}
        for e, r in rows:
            groups.setdefault((e.family, e.severity), []).append((e, r))
        out = []
        for (fam, sev), items in sorted(groups.items()) + [(("all", 0), rows)]:
            out.append({
                "method": method, "family": fam, "severity": sev, "n": len(items),
                "accuracy": float(np.mean([r.prediction == e.label for e, r in items])),
                "mean_entropy_before": float(np.mean([r.entropy_original for _, r in items])),
                "mean_entropy_after": float(np.mean([r.entropy_chosen for _, r in items])),
                "keep_rate": float(np.mean([r.filter_kept_adapted for _, r in items])),
                "mean_wall_seconds": "skipped",
            })
        return out

    def replace_method(self, method: str, new_rows: list[dict]) -> None:
        self.rows = [r for r in self.rows if r["method"] != method] + new_rows
        order = {m: i for i, m in enumerate(METHODS)}
        self.rows.sort(key=lambda r: (order.get(r["method"], len(order)), r["family"] == "all", r["family"],
                                      int(r["severity"])))

    def get(self, method: str, family: str = "all") -> dict:
        for r in self.rows:
            if r["method"] == method and r["family"] == family:
                return r
        raise KeyError((method, family))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in TABLE_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            row = {"method": r["method"], "family": r["family"], "severity": int(r["severity"]), "n": int(r["n"])}
            for c in ("accuracy", "mean_entropy_before", "mean_entropy_after", "keep_rate"):
                row[c] = float(r[c])
            row["mean_wall_seconds"] = r["mean_wall_seconds"] if r["mean_wall_seconds"] == "skipped" \
                else float(r["mean_wall_seconds"])
            rows.append(row)
        return cls(rows)


def guidance_update_ratio(ctx: Context, method: str = "gda", n: int = 100) -> float:
    """Median first-step ||scale * grad|| / ||x|| over the first ``n`` benchmark entries."""
    entries = sorted(ctx.bench.manifest.shifted(), key=lambda e: e.sample_id)[:n]
    xs, _, ids = ctx.bench.arrays(entries)
    x0 = torch.as_tensor(xs)
    plan = ctx.plan()
    cfg = ctx.guidance(**({"lambda_marginal": 0.0} if method == "gda_no_marginal" else {}))
    seeds = [ctx.sample_seed(s) for s in ids]
    eps = torch.stack([torch.randn(x0.shape[1:], generator=make_stream(s, "forward")) for s in seeds])
    t = plan.start_step
    xt = forward_diffuse(x0, t, eps, ctx.sched)
    with torch.no_grad():
        x0_hat = predict_x0(xt, t, ctx.bundle.denoiser(xt, t), ctx.sched)
    from gda.guidance import ChainBank, build_augmentations
    bank = None
    if cfg.aug_count and cfg.weights[0]:
        bank = ChainBank.stack([build_augmentations(cfg, np.random.default_rng(derive_seed(s, "chains")), tuple(x0.shape[1:]))
                                for s in seeds], tuple(x0.shape[1:]))
    _, g = composite_guidance(ctx.bundle, cfg, x0_hat, x0, bank)
    ratio = plan.guidance_scale * g.flatten(1).norm(dim=1) / x0.flatten(1).norm(dim=1)
    return float(ratio.median())


def calibrate_lambda_scale(ctx: Context, target: float = 0.01) -> float:
    """lambda_scale putting the median first-step update at ``target`` * ||x||.

    The update is linear in the common multiplier, so one measurement suffices.
    """
    current = float(ctx.doc["guidance"]["lambda_scale"])
    ratio = guidance_update_ratio(ctx)
    if ratio == 0:
        raise NumericalError("guidance gradient vanished; cannot calibrate")
    return current * target / ratio


def adapt(doc: dict, method: str) -> tuple[Path, ResultTable]:
    ctx = Context.load(doc)
    methods = METHODS if method == "all" else (method,)
    table_path = out_dir(doc) / "results.csv"
    table = ResultTable.from_csv(table_path.read_text()) if table_path.exists() else ResultTable()
    for m in methods:
        rows = run_method(ctx, m)
        failures = sum(r.failed for _, r in rows)
        if failures:
            log.warning("%s: %d samples hit non-finite guidance and fell back to the original", m, failures)
        _atomic_write(out_dir(doc) / "adapt" / m / "records.csv", records_csv(m, rows))
        manifest = {"method": m, "samples": len(rows), "failed": failures}
        if m in ("gda", "gda_no_marginal"):
            manifest["first_step_update_ratio"] = guidance_update_ratio(ctx, m)
        _atomic_write(out_dir(doc) / "adapt" / m / "run_manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        table.replace_method(m, ResultTable.summarize(m, rows))
    _atomic_write(table_path, table.to_csv())
    write_resolved(doc)
    return table_path, table


# -- sweeps and reports ------------------------------------------------------

def _acc(rows) -> float:
    return float(np.mean([r.prediction == e.label for e, r in rows]))


def _write_rows(path: Path, header: tuple, rows: list[tuple]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _atomic_write(path, buf.getvalue())


def sweep_steps(doc: dict, ctx: Context | None = None) -> dict[tuple[str, int], float]:
    ctx = ctx or Context.load(doc)
    out = {("standard", 0): _acc(run_method(ctx, "standard"))}
    for n in doc["bench"]["step_counts"]:
        for m in ("dda", "gda"):
            out[(m, int(n))] = _acc(run_method(ctx, m, plan_overrides={"num_steps": int(n)}))
    rows = [(m, n, acc) for (m, n), acc in out.items()]
    _write_rows(out_dir(doc) / "sweeps" / "steps.csv", ("method", "steps", "accuracy"), rows)
    write_resolved(doc)
    return out


def sweep_augs(doc: dict, ctx: Context | None = None) -> dict[int, float]:
    ctx = ctx or Context.load(doc)
    out = {}
    for k in doc["bench"]["aug_counts"]:
        out[int(k)] = _acc(run_method(ctx, "gda", guidance_overrides={"aug_count": int(k)}))
    no_marg = _acc(run_method(ctx, "gda_no_marginal"))
    rows = [(k, acc) for k, acc in out.items()]
    rows.append(("gda_no_marginal", no_marg))
    _write_rows(out_dir(doc) / "sweeps" / "augs.csv", ("aug_count", "accuracy"), rows)
    write_resolved(doc)
    return out


def _existing_or_run(ctx: Context, method: str) -> list[dict]:
    path = out_dir(ctx.doc) / "adapt" / method / "records.csv"
    if not path.exists():
        _atomic_write(path, records_csv(method, run_method(ctx, method)))
    return read_records(path)


def entropy_report(doc: dict, ctx: Context | None = None) -> dict[str, dict]:
    """Entropy distributions of clean, corrupted and adapted samples (histogram + raw series CSVs)."""
    ctx = ctx or Context.load(doc)
    clean = ctx.bench.manifest.clean()
    xs, _, ids = ctx.bench.arrays(clean)
    from gda.guidance import uncertainty
    h_clean = uncertainty(ctx.bundle.classifier, torch.as_tensor(xs)).tolist()
    series: list[tuple[str, str, str, float]] = [("clean", "clean", sid, h) for sid, h in zip(ids, h_clean)]
    base = _existing_or_run(ctx, "standard")
    series += [("corrupted", r["family"], r["sample_id"], float(r["entropy_original"])) for r in base]
    for m in ("diffpure", "dda", "gda"):
        recs = _existing_or_run(ctx, m)
        series += [(m, r["family"], r["sample_id"], float(r["entropy_adapted"])) for r in recs]
    root = out_dir(doc) / "entropy"
    _write_rows(root / "series.csv", ("series", "family", "sample_id", "entropy"), series)
    bins = int(doc["bench"]["histogram_bins"])
    edges = np.linspace(0.0, math.log(4), bins + 1)
    hist_rows, summary = [], {}
    names = ("clean", "corrupted", "diffpure", "dda", "gda")
    families = ["all"] + sorted({s[1] for s in series if s[0] != "clean"})
    for name in names:
        for fam in families if name != "clean" else ["all"]:
            vals = np.array([s[3] for s in series if s[0] == name and (fam == "all" or s[1] == fam)])
            counts, _ = np.histogram(np.clip(vals, 0.0, math.log(4)), bins=edges)
            hist_rows += [(name, fam, float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]
            summary[(name, fam)] = {"n": len(vals), "median": float(np.median(vals)), "mean": float(vals.mean())}
    _write_rows(root / "histogram.csv", ("series", "family", "bin_lo", "bin_hi", "count"), hist_rows)
    _write_rows(root / "summary.csv", ("series", "family", "n", "median", "mean"),
                [(k[0], k[1], v["n"], v["median"], v["mean"]) for k, v in summary.items()])
    write_resolved(doc)
    return {f"{k[0]}/{k[1]}": v for k, v in summary.items()}


def timing(doc: dict, ctx: Context | None = None) -> dict[str, float]:
    """Mean wall-seconds per sample on a fixed subset, one batch per method."""
    ctx = ctx or Context.load(doc)
    n = int(doc["bench"]["timing_samples"])
    entries = sorted(ctx.bench.manifest.shifted(), key=lambda e: e.sample_id)
    # linspace rather than a fixed stride: labels cycle, so an integer stride can hit a single class
    picks = np.unique(np.linspace(0, len(entries) - 1, min(n, len(entries))).round().astype(int))
    subset = [entries[i] for i in picks]
    variants = [
        ("diffpure", "diffpure", {}, {}),
        ("dda_10", "dda", {"num_steps": 10}, {}),
        ("dda_50", "dda", {"num_steps": 50}, {}),
        ("gda_no_marginal", "gda_no_marginal", {}, {}),
        ("gda", "gda", {}, {"aug_count": 16}),
    ]
    saved_bs = ctx.doc["bench"]["batch_size"]
    ctx.doc["bench"]["batch_size"] = len(subset)
    out, rows = {}, []
    try:
        for name, m, po, go in variants:
            t0 = time.perf_counter()
            recs = run_method(ctx, m, subset, plan_overrides=po, guidance_overrides=go)
            per_sample = (time.perf_counter() - t0) / len(subset)
            out[name] = per_sample
            rows.append((name, len(subset), per_sample, _acc(recs)))
    finally:
        ctx.doc["bench"]["batch_size"] = saved_bs
    _write_rows(out_dir(doc) / "timing.csv", ("method", "samples", "mean_wall_seconds", "accuracy"), rows)
    write_resolved(doc)
    return out
