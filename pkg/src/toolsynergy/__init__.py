"""Simulated multi-tool reasoning: tool pools, a tagged transcript protocol,
a linear-softmax tool-use policy trained with group-relative policy gradients,
and risk/complementarity analysis."""

__version__ = "0.1.0"
