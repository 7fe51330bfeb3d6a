"""Gated single-shot detector."""
