"""EgoMap: differentiable projective mapping and structured egocentric memory for RL agents."""

__version__ = "0.1.0"
