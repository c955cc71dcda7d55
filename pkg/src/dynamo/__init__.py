"""Dynamical model embedding: meta-models that emulate populations of trained
networks, plus the embedding-space and fixed-point analyses built on them."""

__version__ = "0.1.0"
