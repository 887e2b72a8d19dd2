"""Desk-scale open-world detection toolkit.

Incrementally learned class embeddings with a synthesized unknown-class
prompt, per-class contrastive anchor modules for out-of-distribution
scoring, a deterministic synthetic benchmark generator, and the full
open-world detection metric suite.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    detection,
    embedding_space,
    errors,
    mscal,
    owod_eval,
    pyramid,
    seeding,
    synthetic_world,
    training,
)
