import os
from pathlib import Path

import numpy as np
import pytest
import torch

from gda import bench
from gda import config as C
from gda.nets import Classifier, EmbeddingEncoder, EpsilonPredictor, NetsBundle
from gda.schedule import build_schedule


@pytest.fixture
def sched():
    return build_schedule()


def random_bundle(seed: int = 0, dtype=torch.float32) -> NetsBundle:
    """Untrained but non-degenerate nets (the denoiser head is re-randomised)."""
    torch.manual_seed(seed)
    den = EpsilonPredictor()
    torch.nn.init.normal_(den.head.weight, std=0.05)
    clf = Classifier()
    enc = EmbeddingEncoder()
    proto = torch.randn(enc.dim, dtype=torch.float64)
    proto = (proto / proto.norm()).to(dtype)
    bundle = NetsBundle(den.to(dtype), clf.to(dtype), enc.to(dtype), proto)
    return bundle.freeze()


@pytest.fixture
def bundle():
    return random_bundle()


@pytest.fixture
def images():
    gen = torch.Generator().manual_seed(1)
    return torch.rand(6, 1, 16, 16, generator=gen) * 2 - 1


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- reference pipeline ------------------------------------------------------

def run_reference_pipeline(out: Path) -> dict:
    """gen-data -> train -> adapt (all methods) with the packaged reference config."""
    doc = C.load(out=out)
    bench.gen_data(doc)
    bench.train(doc)
    bench.adapt(doc, "all")
    return doc


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """Completed reference run; ``GDA_REFERENCE_RUN`` may point at an existing one to reuse."""
    existing = os.environ.get("GDA_REFERENCE_RUN")
    if existing and (Path(existing) / "results.csv").exists():
        return C.load(out=existing)
    return run_reference_pipeline(tmp_path_factory.mktemp("reference") / "run")


@pytest.fixture(scope="session")
def reference_ctx(reference_run):
    return bench.Context.load(reference_run)
