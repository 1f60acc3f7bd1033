import os
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nlos_emd.backproject import build_index
from nlos_emd.emd import DecomposeParams, decompose
from nlos_emd.forward import ForwardParams, simulate
from nlos_emd.metrics import voxelize_truth
from nlos_emd.scene import fixture_defaults, make_grid_scene_fixture

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=400, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


class DeskRun:
    """Everything derived from one desk-sim forward run."""

    def __init__(self, fwhm: float):
        self.scene, self.grid, self.axis = make_grid_scene_fixture("desk-sim")
        self.defaults = fixture_defaults("desk-sim")
        self.h = simulate(self.scene, None, self.axis, ForwardParams(
            photon_scale=self.defaults["photon_scale"], broadening_fwhm=fwhm, quantize=True))
        self.index = build_index(self.scene.geom, self.grid, self.axis)
        self.params = DecomposeParams(h_s=self.defaults["h_s"], h_c=self.defaults["h_c"],
                                      stop_fraction=self.defaults["stop_fraction"])
        self.dec = decompose(self.h, self.index, self.params)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            self.truth = voxelize_truth(self.scene, self.grid)


@pytest.fixture(scope="session")
def desk_int():
    """Unbroadened integer counts."""
    return DeskRun(0.0)


@pytest.fixture(scope="session")
def desk():
    """50 ps broadening, the configuration the reconstruction defaults target."""
    return DeskRun(fixture_defaults("desk-sim")["broadening_fwhm"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
