"""Uncertainty-aware VAD regression from speech and text, with cross-modal
inconsistency detection and gated fusion restricted to consistent pairs."""

__version__ = "0.1.0"
