"""Conditional GANs with auxiliary classifiers: AC-GAN, TAC-GAN and UAC-GAN (AC-GAN + MINE)."""

__version__ = "0.1.0"
