import copy
import time

import numpy as np
import pytest
import torch

from masque import faces
from masque.config import ProtectionConfig
from masque.harness import build_records, calibrate_on_dataset, protect_records
from masque.inversion import invert
from masque.models import load_diffusion, load_embedder

CRITERIA = {}

# desk-scale fixture: 50 held-out identities, 5 renders each
DESK_IDENTITIES = 50
DESK_PROMPT = "red lipstick"


def report_criterion(number: int, ok: bool, detail: str):
    CRITERIA[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])


@pytest.fixture(scope="session")
def backend():
    return load_diffusion()


@pytest.fixture(scope="session")
def emb_a():
    return load_embedder("A")


@pytest.fixture(scope="session")
def emb_b():
    return load_embedder("B")


@pytest.fixture(scope="session")
def small_faces():
    return faces.generate(4, 3, seed=7, identity_seed=300)


@pytest.fixture(scope="session")
def desk_threshold(emb_b):
    cal = faces.generate(200, 1, seed=21, identity_seed=2000)
    return calibrate_on_dataset(emb_b, cal, far=0.01, n_pairs=10000)


@pytest.fixture(scope="session")
def desk_dataset():
    return faces.generate(DESK_IDENTITIES, 5, seed=5, identity_seed=1000)


@pytest.fixture(scope="session")
def desk_records(desk_dataset):
    return build_records(desk_dataset, DESK_PROMPT)


@pytest.fixture(scope="session")
def desk_inversion20(backend, desk_records):
    """Null-text inversion of the first 20 probes, timed."""
    t = time.time()
    trajs = []
    for k in range(0, 20, 10):
        trajs += invert(backend, np.stack([r.probe for r in desk_records[k:k + 10]]), "a face")
    return trajs, time.time() - t


@pytest.fixture(scope="session")
def desk_trajectories(backend, desk_records, desk_inversion20):
    """Inversions of all desk probes; returns (trajectories, seconds including the first 20)."""
    trajs, seconds = list(desk_inversion20[0]), desk_inversion20[1]
    t = time.time()
    for k in range(20, len(desk_records), 10):
        trajs += invert(backend, np.stack([r.probe for r in desk_records[k:k + 10]]), "a face")
    return trajs, seconds + time.time() - t


@pytest.fixture(scope="session")
def desk_protection(backend, emb_a, desk_records, desk_trajectories):
    """Default-config protection of all desk records; returns (records, reconstructions, provenance, seconds)."""
    torch.manual_seed(0)
    records = copy.deepcopy(desk_records)
    t = time.time()
    recs, prov, _ = protect_records(backend, records, ProtectionConfig(), emb_a, desk_trajectories[0])
    return records, recs, prov, time.time() - t
