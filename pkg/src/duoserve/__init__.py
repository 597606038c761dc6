"""Trace-driven toolkit for dual-phase MoE expert prefetch scheduling.

The package covers the full desk-scale pipeline: activation-trace
generation and ingestion, expert popularity/affinity statistics, a
multi-label next-layer expert predictor, and a deterministic
discrete-event simulator comparing prefetch scheduling policies.
"""

__version__ = "0.1.0"
