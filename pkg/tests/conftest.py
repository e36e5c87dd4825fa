import numpy as np
import pytest
import torch

from kptlm.data import generate_synthetic
from kptlm.model import ModelBundle, ModelConfig
from kptlm.tokenizer import Vocabulary

torch.set_num_threads(1)

TINY = dict(image_size=16, patch=8, C=16, D=16, enc_depth=1, enc_heads=2, lm_depth=2, heads=2, context=512,
            rank=2, mlp_ratio=2)


@pytest.fixture
def vocab():
    return Vocabulary()


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_cfg):
    return ModelBundle(tiny_cfg, seed=3)


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic(4, 6, seed=2, image_size=16, n_test=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ------------------------------------------------------------------

_RESULTS = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self, results: dict):
        self.results = results

    def __call__(self, number: int, title: str):
        return _Record(self.results, number, title)


class _Record:
    def __init__(self, results, number, title):
        self.results, self.number, self.title = results, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        ok = kind is None
        detail = self.detail if ok or not exc else f"{self.detail} {type(exc).__name__}: {exc}".strip()
        self.results[self.number] = (self.title, ok, " ".join(detail.split())[:300])
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c: ...`` records one pass/fail line; set ``c.detail`` for the numbers."""
    return _Criterion(request.config.stash.setdefault(_RESULTS, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        title, ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
