import pytest


@pytest.fixture(scope="session")
def prototypes():
    from robustlab.fonts import builtin_prototypes

    return builtin_prototypes()


@pytest.fixture(scope="session")
def small_splits(prototypes):
    from robustlab.fonts import make_splits

    return make_splits(prototypes, 30, 20, seed=3)


@pytest.fixture(scope="session")
def trained_small(small_splits):
    """A conv_small model trained briefly on 300 images (shared, read-only)."""
    from robustlab.autodiff import build_architecture
    from robustlab.defenses import TrainingSchedule, train

    train_set, _ = small_splits
    model = build_architecture("conv_small", seed=0)
    train(model, train_set, schedule=TrainingSchedule(epochs=4, seed=0))
    return model


@pytest.fixture(scope="session")
def medium_splits(prototypes):
    from robustlab.fonts import make_splits

    return make_splits(prototypes, 200, 50, seed=0)


@pytest.fixture(scope="session")
def trained_medium(medium_splits):
    """conv_small trained for 10 epochs on 2000 images, without augmentation."""
    from robustlab.autodiff import build_architecture
    from robustlab.defenses import TrainingSchedule, train

    train_set, _ = medium_splits
    model = build_architecture("conv_small", seed=0)
    train(model, train_set, schedule=TrainingSchedule(epochs=10, seed=0))
    return model


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
