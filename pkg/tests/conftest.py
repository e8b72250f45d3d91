import pytest


@pytest.fixture
def tiny_synthetic_config():
    return {
        "data": {
            "source": "synthetic",
            "num_classes": 4,
            "feature_dim": 5,
            "train_per_class": 40,
            "test_per_class": 10,
            "noise_sigma": 1.0,
        },
        "partition": {"scheme": "pathological", "num_clients": 4},
        "rounds": 3,
        "local_epochs": 1,
        "batch_size": 16,
        "lr_net": 0.05,
        "lr_dr": 0.01,
        "scheduler": {"kind": "cosine", "mu": 0.1, "L_fraction": 0.5},
        "seed": 7,
    }


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[number])
