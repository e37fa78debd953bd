"""Wi-Fi CSI toolkit: simulation, harmonization, MAE pretraining, evaluation."""

__version__ = "0.1.0"
