"""Iterative Dual-RL: dual value learning, visitation-ratio correction,
iterative dataset filtering and weighted behavior cloning."""

from idrl.divergence import DivergenceSpec, DomainError

__all__ = ["DivergenceSpec", "DomainError"]
__version__ = "0.1.0"
