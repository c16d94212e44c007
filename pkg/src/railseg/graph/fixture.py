"""A tiny instance of the optimized topology for tests and golden runs.

Same structure as the full model (C3Ghost encoder, efficient head, P3/P4
prediction, ProtoNet) at 1/16 width on a 32 x 32 input, so a forward pass
takes milliseconds.
"""
from __future__ import annotations

from dataclasses import replace

from .build import OPTIMIZED, build
from .execute import init_weights

TINY = replace(OPTIMIZED, width=0.0625, proto_channels=16, name="tiny")
TINY_SIZE = 32
TINY_CLASSES = 2
TINY_SEED = 7


def tiny_graph():
    return build(TINY, TINY_SIZE, TINY_CLASSES)


def tiny_model():
    """(graph, weights) of the fixture model."""
    g = tiny_graph()
    return g, init_weights(g, TINY_SEED)
