"""Causal transformer with action-conditioned recurrent position encodings and episodic memory."""

__version__ = "0.1.0"
