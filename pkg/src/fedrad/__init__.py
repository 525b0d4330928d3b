"""fedrad: desk-scale federated training, fault simulation, and evaluation."""

__version__ = "0.1.0"
