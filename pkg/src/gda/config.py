"""Run configuration: strict JSON documents validated against the reference config's key tree."""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path
from typing import Any

from gda.guidance import WEIGHT_PRESETS, GuidanceConfig
from gda.nets import TrainConfig
from gda.sampler import SamplerPlan
from gda.schedule import NoiseSchedule, build_schedule
from gda.shiftgen import CORRUPTIONS, SEVERITY_TABLES, ShiftSpec, SourceSpec

LAMBDA_KEYS = ("lambda_marginal", "lambda_style", "lambda_content")


class ConfigError(ValueError):
    pass


def reference_config() -> dict:
    text = resources.files("gda").joinpath("configs/reference.json").read_text()
    return json.loads(text)


def _check_tree(doc: Any, ref: Any, path: str, errors: list[str]) -> None:
    if isinstance(ref, dict):
        if not isinstance(doc, dict):
            errors.append(f"{path or '<root>'}: expected an object")
            return
        optional = set(LAMBDA_KEYS) if path == "guidance" and doc.get("preset") is not None else set()
        for key in sorted(set(doc) - set(ref)):
            errors.append(f"unknown key {path + '.' if path else ''}{key}")
        for key in sorted(set(ref) - set(doc) - optional):
            errors.append(f"missing key {path + '.' if path else ''}{key}")
        for key in sorted(set(ref) & set(doc)):
            _check_tree(doc[key], ref[key], f"{path}.{key}" if path else key, errors)
    elif isinstance(ref, list):
        if not isinstance(doc, list):
            errors.append(f"{path}: expected a list")
    elif isinstance(ref, bool):
        if not isinstance(doc, bool):
            errors.append(f"{path}: expected a boolean")
    elif isinstance(ref, (int, float)) and not isinstance(ref, bool):
        if isinstance(doc, bool) or not isinstance(doc, (int, float)):
            errors.append(f"{path}: expected a number")
    elif isinstance(ref, str) and ref and not isinstance(doc, (str, type(None))):
        errors.append(f"{path}: expected a string")


def validate(doc: dict) -> dict:
    errors: list[str] = []
    _check_tree(doc, reference_config(), "", errors)
    if errors:
        raise ConfigError("; ".join(errors))
    doc = resolve(doc)
    # Fail early on semantic errors by building every component.
    try:
        sched = schedule_from(doc)
        plan_from(doc).check(sched)
        guidance_from(doc)
        shifts_from(doc)
        spec = source_spec_from(doc)
        _check_bench(doc, sched, spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return doc


def _check_bench(doc: dict, sched: NoiseSchedule, spec: SourceSpec) -> None:
    b, s = doc["bench"], doc["shift"]
    if int(b["batch_size"]) < 1:
        raise ValueError("bench.batch_size must be >= 1")
    f = int(b["dda_scale_factor"])
    if f < 2 or spec.image_size % f:
        raise ValueError(f"bench.dda_scale_factor {f} must be >= 2 and divide {spec.image_size}")
    sched.check_t(int(b["diffpure_t_star"]))
    for n in b["step_counts"]:
        plan_from(doc, num_steps=int(n))
    if any(int(k) < 0 for k in b["aug_counts"]):
        raise ValueError("bench.aug_counts must be >= 0")
    if not 1 <= int(s["n_per_shift"]) <= int(s["samples_per_class_test"]) * spec.class_count:
        raise ValueError("shift.n_per_shift must lie in [1, test set size]")
    if int(b["histogram_bins"]) < 1 or int(b["timing_samples"]) < 1:
        raise ValueError("bench.histogram_bins and bench.timing_samples must be >= 1")


def resolve(doc: dict) -> dict:
    """Copy of ``doc`` with a named weight preset expanded into the lambda keys."""
    doc = copy.deepcopy(doc)
    g = doc["guidance"]
    preset = g.get("preset")
    if preset is not None:
        if preset not in WEIGHT_PRESETS:
            raise ConfigError(f"unknown weight preset {preset!r}; choose from {sorted(WEIGHT_PRESETS)}")
        m, s, c = WEIGHT_PRESETS[preset]
        given = {k: g[k] for k in LAMBDA_KEYS if k in g}
        expected = dict(zip(LAMBDA_KEYS, (m, s, c)))
        clash = {k: v for k, v in given.items() if float(v) != expected[k]}
        if clash:
            raise ConfigError(f"lambda values {clash} contradict preset {preset!r}")
        g.update(expected)
    return doc


def load(path: str | Path | None = None, seed: int | None = None, out: str | Path | None = None) -> dict:
    if path is None:
        doc = reference_config()
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if seed is not None:
        doc["master_seed"] = int(seed)
    if out is not None:
        doc["output_dir"] = str(out)
    return validate(doc)


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# -- component builders ------------------------------------------------------

def schedule_from(doc: dict) -> NoiseSchedule:
    d = doc["diffusion"]
    return build_schedule(int(d["total_steps"]), float(d["beta_min"]), float(d["beta_max"]), bool(d["deterministic"]))


def plan_from(doc: dict, **overrides) -> SamplerPlan:
    p = doc["plan"]
    clamp = p["clamp"]
    kw = dict(start_step=int(doc["diffusion"]["start_step"]), stride=int(p["stride"]), mode=p["mode"],
              guidance_scale=float(p["guidance_scale"]),
              clamp_range=(float(clamp[0]), float(clamp[1])) if p["clamp_enabled"] else None,
              redraw_chains=bool(p["redraw_chains"]))
    kw.update(overrides)
    return SamplerPlan(**kw)


def guidance_from(doc: dict, prototype=None, **overrides) -> GuidanceConfig:
    g = resolve(doc)["guidance"]
    kw = dict(lambda_marginal=float(g["lambda_marginal"]), lambda_style=float(g["lambda_style"]),
              lambda_content=float(g["lambda_content"]), lambda_scale=float(g["lambda_scale"]),
              aug_count=int(g["aug_count"]), temperature=float(g["temperature"]),
              patch_grid=(int(g["patch_rows"]), int(g["patch_cols"])),
              negatives_per_patch=int(g["negatives_per_patch"]), max_depth=int(g["max_depth"]),
              style_prototype=prototype)
    kw.update(overrides)
    return GuidanceConfig(**kw)


def source_spec_from(doc: dict) -> SourceSpec:
    s = doc["shift"]
    return SourceSpec(jitter_px=float(s["jitter_px"]), scale_range=tuple(float(v) for v in s["scale_range"]),
                      noise_amplitude=float(s["noise_amplitude"]),
                      samples_per_class={"train": int(s["samples_per_class_train"]),
                                         "test": int(s["samples_per_class_test"])})


def shifts_from(doc: dict) -> list[ShiftSpec]:
    s = doc["shift"]
    families = list(s["families"])
    unknown = [f for f in families if f not in SEVERITY_TABLES]
    if unknown:
        raise ConfigError(f"unknown shift families {unknown}")
    return [ShiftSpec(f, int(s["severity"])) for f in families]


def train_config_from(doc: dict, net: str) -> TrainConfig:
    n = doc["nets"][net]
    return TrainConfig(epochs=int(n["epochs"]), batch_size=int(n["batch_size"]), lr=float(n["lr"]),
                       seed=int(doc["master_seed"]) * 1000 + int(doc["nets"]["seed"]) + {"denoiser": 1, "classifier": 2, "encoder": 3}[net])


def arch_from(doc: dict, net: str) -> dict:
    n = doc["nets"][net]
    keys = {"denoiser": ("width", "mid", "time_dim", "feature_tap"),
            "classifier": ("width",), "encoder": ("width", "dim")}[net]
    return {k: n[k] for k in keys}


DEFAULT_FAMILIES = CORRUPTIONS
