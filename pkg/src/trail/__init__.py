"""Trust-aware client scheduling for semi-decentralized federated learning."""

__version__ = "0.1.0"
