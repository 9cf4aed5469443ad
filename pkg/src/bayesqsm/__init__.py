"""Bayesian dipole inversion for quantitative susceptibility mapping.

MAP (edge-masked total variation), subject-specific mean-field variational
inference, and a small dual-decoder posterior network, plus the phantom and
multi-echo simulation pipeline used to exercise them.
"""

__version__ = "0.1.0"
