import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from wififlow.model import DayTrajectory, day_window, link_entries
from wififlow.preprocess import compute_stay_take

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", deadline=None, max_examples=100, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# 2024-01-01 03:00 UTC, the first synthetic day window
DAY0 = 19723


def make_traj(items, device="d1", day=DAY0, tz_offset=0):
    """Sensor-level trajectory from (sensor, start offset, end offset) in
    seconds after the day's 03:00 start, with stay/take filled in."""
    w = day_window(day, tz_offset)
    entries = link_entries(device, [(s, w.start + a, w.start + b) for s, a, b in items])
    return compute_stay_take(DayTrajectory(device, w, entries))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 400-device, 14-day synthetic log with its ground truth on disk."""
    from wififlow.config import PipelineConfig
    from wififlow.pipeline import run_synth

    out = tmp_path_factory.mktemp("synth")
    cfg = PipelineConfig(out=str(out), seed=3, devices=400, days=14, ph_days="10").validate()
    run_synth(cfg)
    return out


# ---- acceptance report ----------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
