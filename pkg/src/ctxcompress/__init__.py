"""Desk-scale laboratory for in-context KV-cache compression.

Small decoder-only transformers built on a numpy reverse-mode tape, a
family of cache-compression methods trained through a two-phase
compress/predict protocol, single-layer pooling experiments, and analytic
attention constructions with matching impossibility bounds.
"""

__version__ = "0.1.0"
