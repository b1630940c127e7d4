"""Imitation-learning policies that feed image features to every recurrent layer.

Subpackages cover the autodiff substrate (``tensor``), network building blocks
(``layers``), the closed-loop policy (``policy``), a synthetic pick-and-place
benchmark (``sim``), the dataset/training pipeline (``training``), gradient
decomposition and attribution diagnostics (``analysis``), and the command-line
surface (``cli``).
"""

__version__ = "0.1.0"
