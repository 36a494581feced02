"""Bundled exact worlds for theory verification, plus task-to-world bridging.

The hand-built worlds keep every probability an explicit constant so test
expectations can be computed by hand; the seeded worlds exercise larger
concept sets. ``world_from_specs`` enumerates the full input space of a
set of synthetic tasks so the neural evaluation path can be cross-checked
against exact enumeration on the same tasks.
"""

from __future__ import annotations

import itertools

import numpy as np

from .oracle import ExactWorld
from .tasks import Direction, TaskSpec, channel_transition, direct_label_conditional


def two_theta_world() -> ExactWorld:
    """Two concepts that disagree sharply on the label rate (hand-checkable)."""
    cond = np.array(
        [
            [[0.1, 0.9], [0.1, 0.9]],  # theta0: P(Y=1|x) = 0.9 everywhere
            [[0.9, 0.1], [0.9, 0.1]],  # theta1: P(Y=1|x) = 0.1 everywhere
        ]
    )
    return ExactWorld(
        direction=Direction.DIRECT,
        theta_names=("theta0", "theta1"),
        prior=np.array([0.5, 0.5]),
        x_space=((0,), (1,)),
        n_labels=2,
        cond=cond,
        px=np.array([0.5, 0.5]),
    )


def three_theta_world() -> ExactWorld:
    """Three concepts over four inputs with input-dependent label rates."""
    cond = np.array(
        [
            [[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.2, 0.8]],
            [[0.2, 0.8], [0.3, 0.7], [0.8, 0.2], [0.9, 0.1]],
            [[0.6, 0.4], [0.4, 0.6], [0.5, 0.5], [0.7, 0.3]],
        ]
    )
    return ExactWorld(
        direction=Direction.DIRECT,
        theta_names=("theta0", "theta1", "theta2"),
        prior=np.array([0.5, 0.3, 0.2]),
        x_space=((0,), (1,), (2,), (3,)),
        n_labels=2,
        cond=cond,
        px=np.array([0.4, 0.3, 0.2, 0.1]),
    )


def five_theta_world(seed: int = 7) -> ExactWorld:
    """Five concepts, six inputs, three labels; rows floored away from zero."""
    rng = np.random.default_rng(seed)
    raw = rng.gamma(1.0, 1.0, size=(5, 6, 3)) + 0.05
    cond = raw / raw.sum(axis=-1, keepdims=True)
    px = rng.gamma(1.0, 1.0, size=6) + 0.05
    return ExactWorld(
        direction=Direction.DIRECT,
        theta_names=tuple(f"theta{i}" for i in range(5)),
        prior=np.full(5, 0.2),
        x_space=tuple((i,) for i in range(6)),
        n_labels=3,
        cond=cond,
        px=px / px.sum(),
    )


def deterministic_world() -> ExactWorld:
    """Two deterministic concepts that disagree on one input.

    A single demonstration at the disagreement point has zero likelihood
    under the wrong concept, so the posterior concentrates exactly and the
    in-context classifier attains the Bayes risk.
    """
    cond = np.array(
        [
            [[1.0, 0.0], [0.0, 1.0]],  # theta0: x0 -> 0, x1 -> 1
            [[1.0, 0.0], [1.0, 0.0]],  # theta1: both -> 0
        ]
    )
    return ExactWorld(
        direction=Direction.DIRECT,
        theta_names=("theta0", "theta1"),
        prior=np.array([0.5, 0.5]),
        x_space=((0,), (1,)),
        n_labels=2,
        cond=cond,
        px=np.array([0.5, 0.5]),
    )


def channel_world() -> ExactWorld:
    """Two concepts emitting length-2 sequences over 3 tokens (CHANNEL)."""
    trans = np.array(
        [
            [[0.7, 0.2, 0.1], [0.1, 0.7, 0.2], [0.2, 0.1, 0.7]],  # theta0, label 0
            [[0.1, 0.1, 0.8], [0.8, 0.1, 0.1], [0.1, 0.8, 0.1]],  # theta0, label 1
            [[0.3, 0.5, 0.2], [0.2, 0.3, 0.5], [0.5, 0.2, 0.3]],  # theta1, label 0
            [[0.6, 0.3, 0.1], [0.1, 0.6, 0.3], [0.3, 0.1, 0.6]],  # theta1, label 1
        ]
    ).reshape(2, 2, 3, 3)
    x_space = tuple(itertools.product(range(3), repeat=2))
    cond = np.empty((2, 2, len(x_space)))
    for j in range(2):
        for y in range(2):
            for ix, x in enumerate(x_space):
                cond[j, y, ix] = (1.0 / 3.0) * trans[j, y][x[0], x[1]]
    return ExactWorld(
        direction=Direction.CHANNEL,
        theta_names=("theta0", "theta1"),
        prior=np.array([0.5, 0.5]),
        x_space=x_space,
        n_labels=2,
        cond=cond,
        py=np.array([0.5, 0.5]),
    )


def bundled_worlds() -> dict[str, ExactWorld]:
    return {
        "two_theta": two_theta_world(),
        "three_theta": three_theta_world(),
        "five_theta": five_theta_world(),
        "deterministic": deterministic_world(),
        "channel": channel_world(),
    }


def world_from_specs(specs: list[TaskSpec], prior: np.ndarray | None = None) -> ExactWorld:
    """Exact world whose concepts are the given tasks' true parameters.

    Enumerates every input sequence, so it is only usable when
    n_base ** seq_len stays small.
    """
    if not specs:
        raise ValueError("need at least one task")
    first = specs[0]
    n_base = first.gen.theta_true.shape[1]
    L = first.gen.seq_len
    for s in specs:
        if s.direction is not first.direction or s.n_labels != first.n_labels:
            raise ValueError("tasks must share direction and label count")
        if s.gen.theta_true.shape[1] != n_base or s.gen.seq_len != L:
            raise ValueError("tasks must share base vocabulary and sequence length")
    n_x = n_base**L
    if n_x > 200_000:
        raise ValueError(f"input space too large to enumerate ({n_x} sequences)")
    x_space = tuple(itertools.product(range(n_base), repeat=L))
    J, Y = len(specs), first.n_labels
    if prior is None:
        prior = np.full(J, 1.0 / J)
    if first.direction is Direction.DIRECT:
        cond = np.empty((J, n_x, Y))
        for j, s in enumerate(specs):
            for ix, x in enumerate(x_space):
                cond[j, ix] = direct_label_conditional(s, x)
        return ExactWorld(
            direction=Direction.DIRECT,
            theta_names=tuple(f"task{s.task_id}" for s in specs),
            prior=prior,
            x_space=x_space,
            n_labels=Y,
            cond=cond,
            px=np.full(n_x, 1.0 / n_x),
        )
    cond = np.empty((J, Y, n_x))
    for j, s in enumerate(specs):
        for y in range(Y):
            trans = channel_transition(s, y)
            for ix, x in enumerate(x_space):
                p = 1.0 / n_base
                for a, b in zip(x[:-1], x[1:]):
                    p *= trans[a, b]
                cond[j, y, ix] = p
    return ExactWorld(
        direction=Direction.CHANNEL,
        theta_names=tuple(f"task{s.task_id}" for s in specs),
        prior=prior,
        x_space=x_space,
        n_labels=Y,
        cond=cond,
        py=np.full(Y, 1.0 / Y),
    )
