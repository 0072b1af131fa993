import pytest

from vibssm import shapegen


def tiny_config(**kw):
    base = dict(n_train=16, n_val=4, n_inlier_test=6, n_outlier_test=3, seed=3, grid=(16, 16, 16),
                n_points=32, radii=(3.6, 3.0, 2.6))
    base.update(kw)
    return shapegen.DatasetConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    shapegen.generate_dataset(tiny_config(), root)
    return shapegen.Dataset(root)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
