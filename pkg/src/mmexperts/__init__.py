"""Multi-modal experts network for steering prediction with sensor gating."""

__version__ = "0.1.0"
