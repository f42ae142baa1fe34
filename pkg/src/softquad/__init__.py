"""Quadruped locomotion RL with surrogate limb-compliance randomization.

A rigid-body quadruped simulator in which soft-limb deformation is modeled by
randomizing effective limb length and limb center of mass, a from-scratch PPO
teacher-student trainer over batched environments, and an evaluation kit for
velocity-regression and cost-of-transport analysis.
"""

from softquad.config import Config, ConfigError, load_config

__version__ = "0.1.0"

__all__ = ["Config", "ConfigError", "load_config", "__version__"]
