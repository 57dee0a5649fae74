"""Continual adversarial generation toolkit: a numpy tensor engine with
reverse-mode differentiation, feature-map adapters for task-incremental
image generation, and a generative-replay classification harness."""

__version__ = "0.1.0"
