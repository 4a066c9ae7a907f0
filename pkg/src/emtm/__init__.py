"""Multi-teacher knowledge distillation for temporal sentence grounding."""

__version__ = "0.1.0"
