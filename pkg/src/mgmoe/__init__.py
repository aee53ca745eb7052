"""Desk-scale multimodal transformer with two-expert LoRA mixture and a four-stage schedule."""

__version__ = "0.1.0"
