import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from segqa import qa
from segqa.encoders import EncoderConfig
from segqa.phantom import BenchmarkConfig, DomainKind, GridConfig, plan_benchmark

settings.register_profile("segqa", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("segqa")

SMALL_COUNTS = {"COMMON": 12, "AV": 4, "CE": 4, "MIP": 3, "PRONE": 3, "RPV_NOISY": 4}


def small_config(seed: int = 0) -> BenchmarkConfig:
    return BenchmarkConfig(seed=seed, grid=GridConfig.small(), counts=SMALL_COUNTS, seg_train=4)


@pytest.fixture(scope="session")
def small_dataset():
    return plan_benchmark(small_config()).materialize()


TINY_DAE = EncoderConfig(latent_dim=8, channels=(2, 4, 4), epochs=2, batch_size=4)
TINY_VAE = EncoderConfig(latent_dim=8, channels=(2, 4, 4), epochs=2, batch_size=4, lr=3e-3)


@pytest.fixture(scope="session")
def small_detectors(small_dataset):
    return qa.train_detectors(small_dataset, seed=0, dae_config=TINY_DAE, vae_config=TINY_VAE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
