import os

# Give numba a real worker pool even on small machines, so the
# thread-count determinism tests compare 1 against several workers.
# This has to happen before anything imports numba.
os.environ.setdefault("NUMBA_NUM_THREADS", "4")

import warnings  # noqa: E402

import numpy as np  # noqa: E402
import pytest  # noqa: E402

warnings.filterwarnings("ignore", message="The TBB threading layer requires TBB")


@pytest.fixture(scope="session")
def demo_run(tmp_path_factory):
    """One full run of the bundled demo pipeline, shared by several tests."""
    from lunagen.pipeline import load_config, run_pipeline, write_demo

    root = tmp_path_factory.mktemp("demo")
    config, base = load_config(write_demo(root))
    manifest, run_log = run_pipeline(config, base, root / "out")
    return root, manifest, run_log


@pytest.fixture(scope="session")
def rolling_scene():
    """Smooth shaded terrain with a few boulders, small enough for quick renders."""
    from lunagen.dem import DemGrid
    from lunagen.pipeline import sun_vector
    from lunagen.procedural import BoulderField
    from lunagen.render import Scene

    dem = DemGrid.from_function(
        48, 48, 4.0, (0.0, 188.0),
        lambda x, y: 8 * np.sin(x / 25.0) * np.cos(y / 30.0) + 3 * np.sin((x + y) / 13.0))
    boulders = BoulderField([[60.0, 120.0], [100.0, 80.0], [130.0, 140.0]], [3.0, 4.0, 2.5])
    return Scene(dem, boulders, sun_direction=sun_vector(100, 30))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: (int(str(k).rstrip("ab")), str(k))):
        title, ok, detail = results[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{key}] {title}: {detail}")
