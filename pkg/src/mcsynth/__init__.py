"""Multi-contrast conditioned adversarial diffusion for synthesising a missing MRI contrast."""

__version__ = "0.1.0"
