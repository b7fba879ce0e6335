"""Shared pytest fixtures: small worlds and scripted demonstration sets"""

import pytest

from chase_env import WorldConfig
from demo_generator import generate_both_conditions


@pytest.fixture
def world() -> WorldConfig:
    return WorldConfig()


@pytest.fixture
def short_world() -> WorldConfig:
    """Same arena with a 2 s time limit so rollouts stay tiny"""
    return WorldConfig(time_limit=2.0)


@pytest.fixture
def small_demos(short_world):
    return generate_both_conditions(short_world, 8, seed=3)
