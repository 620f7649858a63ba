"""Procedural corridor environments: straight approaches with L-turns and
optional dead-end stubs, widths in the 1.5-2.5 m band.

Axis-aligned geometry keeps the wall bookkeeping exact; turn direction,
lengths, and width vary with the seed.
"""

from __future__ import annotations

import numpy as np

from .sensor import Environment
from .trajopt import RobotState


def corridor_environment(seed: int, width=None, leg1=None, leg2=None, stub=None):
    """L-shaped corridor with a sealed perimeter.

    Returns (Environment, start RobotState, goal (x, y)). The approach runs
    along +x from the origin; the corridor then turns up or down (by seed)
    into a second leg, with an optional straight dead-end stub past the
    corner that makes corner-cutting through unknown space tempting.
    """
    rng = np.random.default_rng(seed)
    width = float(rng.uniform(1.8, 2.4)) if width is None else width
    leg1 = float(rng.uniform(7.5, 9.5)) if leg1 is None else leg1
    leg2 = float(rng.uniform(5.5, 7.5)) if leg2 is None else leg2
    stub = float(rng.uniform(1.0, 2.0)) if stub is None else stub
    turn = 1.0 if rng.random() < 0.5 else -1.0
    half = width / 2.0

    # mirror everything over y for turn = -1 by scaling y coordinates
    def pt(x, y):
        return (x, turn * y)

    walls = []

    def wall(a, b):
        walls.append([*pt(*a), *pt(*b)])

    # approach corridor along +x; the turn goes toward +y pre-mirror
    # inner wall (corner side)
    wall((0.0, half), (leg1 - half, half))
    # inner wall of the second leg
    wall((leg1 - half, half), (leg1 - half, leg2))
    if stub > 0:
        # outer wall continues straight past the corner into a dead end
        wall((0.0, -half), (leg1 + half + stub, -half))
        wall((leg1 + half + stub, -half), (leg1 + half + stub, half))
        wall((leg1 + half, half), (leg1 + half + stub, half))
    else:
        wall((0.0, -half), (leg1 + half, -half))
        wall((leg1 + half, -half), (leg1 + half, half))
    # outer wall of the second leg
    wall((leg1 + half, half), (leg1 + half, leg2))
    # caps
    wall((0.0, -half), (0.0, half))
    wall((leg1 - half, leg2), (leg1 + half, leg2))

    xs = [w[i] for w in walls for i in (0, 2)]
    ys = [w[i] for w in walls for i in (1, 3)]
    margin = 0.5
    bounds = (min(xs) - margin, min(ys) - margin, max(xs) + margin, max(ys) + margin)
    env = Environment(np.array(walls), bounds)

    start = RobotState(x=0.6, y=0.0, v=0.5, theta=0.0, delta=0.0)
    goal = pt(leg1, leg2 - 0.8)
    return env, start, (float(goal[0]), float(goal[1]))


def straight_corridor(length=10.0, width=2.0):
    """Plain straight corridor for smoke tests."""
    half = width / 2.0
    walls = np.array(
        [
            [0.0, half, length, half],
            [0.0, -half, length, -half],
            [0.0, -half, 0.0, half],
            [length, -half, length, half],
        ]
    )
    bounds = (-0.5, -half - 0.5, length + 0.5, half + 0.5)
    env = Environment(walls, bounds)
    start = RobotState(x=0.6, y=0.0, v=0.5, theta=0.0, delta=0.0)
    return env, start, (length - 0.8, 0.0)
