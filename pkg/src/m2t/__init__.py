"""Desk-scale student-teacher self-supervised learning with momentum
batch-norm statistics."""

__version__ = "0.1.0"

from . import (  # noqa: F401
    checkpoint,
    config,
    data,
    engine,
    evaluate,
    gradcheck,
    model,
    normalization,
    objectives,
    schedules,
    seeding,
    trainer,
)
