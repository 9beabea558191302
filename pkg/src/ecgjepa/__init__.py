"""Self-supervised pretraining for 12-lead ECG by masked latent feature
prediction, built on a minimal numpy-backed autodiff engine."""

__version__ = "0.1.0"
