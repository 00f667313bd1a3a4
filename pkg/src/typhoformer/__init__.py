"""Desk-scale tropical cyclone track forecasting with prompt-gated fusion.

HURDAT2 parsing, template prompts, hashed-token embeddings, a small
numpy autodiff engine, the gated-fusion transformer, training and
evaluation against persistence and constant-motion baselines.
"""

__version__ = "0.1.0"
