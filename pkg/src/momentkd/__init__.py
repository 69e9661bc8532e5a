"""Knowledge distillation by adversarial action-value moment matching on small exact MDPs."""

from .core import Task, Trajectory, make_fixture_task
from .oracle import certify, exact_gap
from .trainer import TrainConfig, run

__all__ = ["Task", "Trajectory", "make_fixture_task", "certify", "exact_gap", "TrainConfig", "run"]
__version__ = "0.1.0"
