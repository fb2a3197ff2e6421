import numpy as np
import pytest
import torch

from livt.priors import ImbalanceProfile, LtDataset, synth_gaussian_lt

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_lt():
    """Three-class long-tailed synthetic set of 4x4 images."""
    prof = ImbalanceProfile("exponential", 40, 4.0, 3)
    return synth_gaussian_lt(3, 16, prof, 4.0, 7, image_shape=(1, 4, 4)).dataset


def balanced_source(per_class: int, C: int, dim: int = 2, seed: int = 0) -> LtDataset:
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(C), per_class)
    feats = rng.standard_normal((labels.size, dim)).astype(np.float32)
    return LtDataset(feats, labels, (1, 1, dim), C)


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one acceptance line: ``record(cid, title, ok, detail, seconds, limit)``."""

    def record(cid, title, ok, detail, seconds, limit):
        within = seconds < limit
        status = "PASS" if ok and within else "FAIL"
        _ACCEPTANCE.append(f"[{status}] {cid:>3}  {title}: {detail}  ({seconds:.1f}s, limit {limit:g}s)")
        return ok and within

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
