"""Evaluate vision-capable chat models on face verification, gender, age and
image classification trials using a prompt-then-judge pipeline."""

from biojudge.protocol import (
    AgeYears,
    ClassLabel,
    Gender,
    ImageRef,
    Protocol,
    SamePerson,
    Task,
    TrialSpec,
)

__version__ = "0.1.0"

__all__ = [
    "AgeYears",
    "ClassLabel",
    "Gender",
    "ImageRef",
    "Protocol",
    "SamePerson",
    "Task",
    "TrialSpec",
]
