"""Desk-scale simulator for grouped, batch-accumulated contrastive pretraining."""

__version__ = "0.1.0"
