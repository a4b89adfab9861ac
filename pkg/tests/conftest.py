import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fairrank.data import SynthConfig, generate_synthetic, split_dataset

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def tiny_config():
    return SynthConfig(num_users=80, num_news=300, impressions_per_user=6, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config):
    return split_dataset(generate_synthetic(tiny_config))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_dataset(tmp_path):
    """Write news/behaviors TSV lines to disk and load them."""
    from fairrank.data import load_dataset

    def make(news, behaviors, name="ds"):
        d = tmp_path / name
        d.mkdir()
        (d / "news.tsv").write_text("".join(line + "\n" for line in news))
        (d / "behaviors.tsv").write_text("".join(line + "\n" for line in behaviors))
        return load_dataset(d / "news.tsv", d / "behaviors.tsv")

    return make


FIVE_NEWS = [f"N{i}\tcat{i % 2}\tw{i} shared" for i in range(1, 6)]

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
