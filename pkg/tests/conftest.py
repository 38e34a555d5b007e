"""Shared fixtures: the rendered benchmark and its species splits."""

import pytest

from promptpose import corpus, synthetic

# One human-readable pass/fail line per acceptance criterion, echoed at the
# end of the run so they are visible without -s.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    synthetic.generate_benchmark(str(out), per_species=24, seed=0)
    return str(out)


@pytest.fixture(scope="session")
def dataset(bench_dir):
    return corpus.load_dataset(f"{bench_dir}/manifest.json")


@pytest.fixture(scope="session")
def train_ds(dataset):
    train, _, _ = corpus.split_dataset(dataset, synthetic.split_config())
    return train


@pytest.fixture(scope="session")
def test_ds(dataset):
    _, _, test = corpus.split_dataset(dataset, synthetic.split_config())
    return test
