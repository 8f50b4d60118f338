"""Adversarial affine augmentation for episodic few-shot learning."""

__version__ = "0.1.0"
