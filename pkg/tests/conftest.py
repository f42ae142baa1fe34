"""Shared fixtures for CLI and serving tests."""

import dataclasses

import pytest

from softquad.config import Config
from softquad.trainer import Trainer


def small_cfg(out_dir, n=2, iters=1, hidden=(32, 32)):
    base = Config()
    return dataclasses.replace(
        base,
        policy=dataclasses.replace(base.policy, hidden_sizes=hidden),
        ppo=dataclasses.replace(base.ppo, epochs=1, minibatches=1),
        train=dataclasses.replace(
            base.train, num_envs=n, iterations=iters, out_dir=str(out_dir)
        ),
    )


@pytest.fixture(scope="session")
def standing_checkpoint(tmp_path_factory):
    """Checkpoint whose student emits zero actions.

    Zero action holds the default joint targets, so the robot stands
    indefinitely; rollouts driven by it never terminate early.
    """
    out = tmp_path_factory.mktemp("standing")
    cfg = small_cfg(out)
    tr = Trainer(cfg)
    tr.env.reset()
    for v in tr.student.params().values():
        v[:] = 0
    path = out / "standing.ckpt"
    tr.save_checkpoint(path)
    return path
