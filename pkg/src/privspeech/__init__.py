"""Differentially private speech classification with an audio-only released student.

Modules: ``features`` (log-Mel + DSAF), ``datamodel`` (datasets, splits,
synthetic data), ``model`` (networks and per-example gradients), ``dpsgd``
(DP teacher training with AW-DP), ``accountant`` (RDP accounting),
``distill`` (offline labeling and student distillation), ``metrics``,
``config``, ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
