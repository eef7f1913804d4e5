"""Resource modelling for Mixture-of-Experts training on HPC systems.

Memory, communication and step-time models, a parallel-plan search, a
hierarchical all-to-all reference with a network latency simulator, and an
expert load rebalancer.
"""

from .core import (ConfigError, ModelArch, ParallelPlan, PlatformSpec, TrainingRun, frontier_like_platform,
                   load_model_zoo, tiny_fixture)

__all__ = [
    "ConfigError", "ModelArch", "ParallelPlan", "PlatformSpec", "TrainingRun",
    "frontier_like_platform", "load_model_zoo", "tiny_fixture",
]
__version__ = "0.1.0"
