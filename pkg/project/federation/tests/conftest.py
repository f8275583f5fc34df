"""
MLaaS federation engine.

Shared test fixtures.

Created by Matua Doc.
Created on 2026-10-19.
"""

import sys
from pathlib import Path

import pytest

# The modules are imported by bare name, as the entry scripts do.
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from main_environment import (build_routing_trace, FederationEnv,  # noqa
                              RewardConfig)
from main_grouping import identity_grouping  # noqa: E402
from main_model import BBox, Detection, ImagePrediction  # noqa: E402


def box(*corners: float) -> BBox:
    """Return a box from four corner values."""
    return BBox(*(float(value) for value in corners))


def prediction(*items: tuple[int, float, BBox]) -> ImagePrediction:
    """Return a prediction from (group, score, box) triples."""
    return ImagePrediction([Detection(group, score, bbox)
                            for group, score, bbox in items])


@pytest.fixture
def routing_trace():
    """A small three-provider routing trace."""
    return build_routing_trace(40, n_providers=3, feature_dim=4, seed=3)


@pytest.fixture
def routing_env(routing_trace):
    """An environment over the routing trace with a cost penalty."""
    table = identity_grouping(routing_trace.ground_truth_labels())
    return FederationEnv(routing_trace, table,
                         reward_config=RewardConfig(beta=-0.1), seed=0)
