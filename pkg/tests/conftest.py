import pytest
from hypothesis import HealthCheck, settings

from vispost.data import SimConfig, join_cases, simulate_dataset

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None and (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        _CRITERIA.append((marker.args[0], marker.args[1], rep.passed, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, duration in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'} ({duration:6.1f} s)  {title}")


@pytest.fixture(scope="session")
def small_dataset():
    """Three stations over 80 days: enough for short rolling windows."""
    cfg = SimConfig(n_stations=3, n_days=80, lead_times=(6, 12))
    forecasts, observations, stations = simulate_dataset(cfg, 11)
    cases, _ = join_cases(forecasts, observations)
    return cfg, forecasts, observations, stations, cases


def random_pmf(rng, n=84, size=None, sparsity=0.0):
    shape = (n,) if size is None else (size, n)
    p = rng.gamma(0.3, size=shape)
    if sparsity:
        p = p * (rng.uniform(size=shape) >= sparsity)
    p[..., rng.integers(n)] += 1e-3
    return p / p.sum(axis=-1, keepdims=True)
