import pytest

from fedafa.config import ExperimentConfig

TINY = dict(num_classes=4, dim=6, n_per_class=120, imbalance_factor=10.0, test_per_class=40,
            num_clients=4, clients_per_round=2, hidden=(16, 8), boundary_index=0, rounds=2,
            local_epochs=1, local_only_epochs=3, batch_size=16)


@pytest.fixture
def tiny():
    return ExperimentConfig(**TINY)


@pytest.fixture
def tiny_args():
    return [arg for k, v in TINY.items()
            for arg in ("--set", f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}")]


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.VERDICTS):
            terminalreporter.write_line(test_acceptance.VERDICTS[n])
