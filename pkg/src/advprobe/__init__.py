"""advprobe: adversarial-attack toolkit for small from-scratch CNNs."""

__version__ = "0.1.0"

from .attacks import AttackConfig, AttackResult, clip01, msimba, simba, tpgd
from .data import LabeledSample, LabeledSet, load_gtsrb_layout, resize_bilinear, synth_signs
from .metrics import SweepSpec, flatness, run_sweep, success_rate, true_class_confidence
from .models import ArchDescriptor, BlackBoxOracle, Classifier, most_confused_class

__all__ = [
    "ArchDescriptor",
    "AttackConfig",
    "AttackResult",
    "BlackBoxOracle",
    "Classifier",
    "LabeledSample",
    "LabeledSet",
    "SweepSpec",
    "clip01",
    "flatness",
    "load_gtsrb_layout",
    "most_confused_class",
    "msimba",
    "resize_bilinear",
    "run_sweep",
    "simba",
    "success_rate",
    "synth_signs",
    "tpgd",
    "true_class_confidence",
]
