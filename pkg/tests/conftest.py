import numpy as np
import pytest

from qmlp_ids import attacks, can_ingest, qnn_int, qnn_train

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        _CRITERIA.setdefault(tuple(marker.args), []).append(status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), statuses in sorted(_CRITERIA.items()):
        if "FAIL" in statuses:
            status = "FAIL"
        elif all(s == "SKIP" for s in statuses):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {n}: {status:<4} {title}")


@pytest.fixture(scope="session")
def dos_frames():
    return attacks.synthesize(attacks.SynthConfig(kind=attacks.AttackKind.DOS, seed=1))


@pytest.fixture(scope="session")
def dos_split(dos_frames):
    tr, te = can_ingest.split_chronological(dos_frames)
    return tr, te


@pytest.fixture(scope="session")
def dos_model(dos_split):
    """Default-architecture 4-bit model trained on the synthetic DoS fixture."""
    tr, _ = dos_split
    x, y = can_ingest.window_dataset(tr)
    model, trace = qnn_train.train(qnn_train.FakeQuantMlp.init(seed=0), x, y, qnn_train.TrainConfig())
    return model, trace


@pytest.fixture(scope="session")
def dos_int_model(dos_model):
    return qnn_int.lower(dos_model[0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
