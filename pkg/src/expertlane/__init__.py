"""Expert-guided DQN training stack for discrete highway driving."""

__version__ = "0.1.0"
