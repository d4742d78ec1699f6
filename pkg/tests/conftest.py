import sys
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ssod import detector as det
from ssod import scenes, sspl

settings.register_profile("ci", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cfg():
    """A narrow detector for fast gradient checks."""
    return det.DetectorConfig(channels=(4, 4, 4), rpn_hidden=4, fc_dim=8, top_n_train=6,
                              top_n_test=8)


@pytest.fixture(scope="session")
def spec():
    return scenes.SceneSpec()


@pytest.fixture(scope="session")
def scene_pair(spec):
    lab, unl = scenes.make_pools(spec, 4, 4, seed=3)
    return lab, unl


def make_params(cfg, seed=0, sspl_cfg=None):
    rng = np.random.default_rng(seed)
    p = det.init_detector_params(cfg, rng)
    p.update(sspl.init_sspl_params(sspl_cfg or sspl.SsplConfig(feature_dim=cfg.fc_dim), rng))
    return p


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    report = getattr(mod, "REPORT", None)
    if report:
        terminalreporter.section("acceptance criteria")
        for n in sorted(report):
            terminalreporter.write_line(report[n])
