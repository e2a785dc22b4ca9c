"""MAML and task-adaptive learned-loss meta-learning on a small autodiff engine."""

__version__ = "0.1.0"
