import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from perceiver_prompt.model import ModelConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_mels=6, d_model=8, n_heads=2, n_encoder_blocks=1, n_decoder_blocks=1, ffn_dim=12,
                       max_target_len=6)


MICRO_CORPUS = dict(n_patients=8, n_healthy=2, utts_per_task=2, healthy_utts_per_task=2, n_test_patients=4, seed=3)


@pytest.fixture(scope="session")
def micro_corpus_root(tmp_path_factory):
    from perceiver_prompt.corpus import CorpusConfig, generate_corpus
    root = tmp_path_factory.mktemp("micro_corpus")
    generate_corpus(root, CorpusConfig(**MICRO_CORPUS))
    return root


# -- acceptance summary --------------------------------------------------------------
_ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}")
