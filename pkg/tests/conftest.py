import numpy as np
import pytest

from pickrank.scene import FixedPlacement, Material, PackageSpec, SceneConfig, generate_scene


def box(pid, length=0.3, width=0.2, height=0.1, material=Material.RIGID_BOX, deform=0.0):
    if material is not Material.RIGID_BOX and deform == 0.0:
        deform = 0.5
    return PackageSpec(pid, material, length, width, height, deform)


def fixed_scene(*placements, seed=0):
    """Scene from (spec, (x, y)[, yaw]) tuples, dropped in order."""
    fps = tuple(FixedPlacement(p[0], p[1], p[2] if len(p) > 2 else 0.0) for p in placements)
    return generate_scene(SceneConfig(fixed_packages=fps), seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def oracle():
    """Default weights calibrated to the 0.944 center-policy rate (seed 0 probe)."""
    from pickrank.oracle import default_oracle
    return default_oracle(seed=0)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, when the acceptance suite ran."""
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(mod.RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(line)
