"""Shared fixtures: the truncation configurations used by the builtin models."""

import pytest

import truncmil as tm

# (omega_coeff, omega_power, h_coeff, h_power, h_bar) per builtin model
BUILTIN_CONFIGS = {
    "cubic_quintic": (4.0, 5.0, 4.0, 0.1, 4.0),
    "strongly_damped_cubic": (83.0, 3.0, 1.0, 0.1, 1.0),
    "stable_quintic": (4.0, 5.0, 4.0, 0.25, 4.0),
}


def config_for(name: str) -> tm.TruncationConfig:
    return tm.TruncationConfig(*BUILTIN_CONFIGS[name])


@pytest.fixture
def cubic_cfg():
    return config_for("cubic_quintic")


@pytest.fixture
def damped_cfg():
    return config_for("strongly_damped_cubic")


@pytest.fixture
def quintic_cfg():
    return config_for("stable_quintic")


@pytest.fixture
def wide_cfg():
    # radius ~ 1e6 for every step size, so truncation never activates
    return tm.TruncationConfig(1.0, 1.0, 1e6, 0.1, 1e6)
