"""Attention-based machine-learning interatomic potential built on a small reverse-mode autodiff core.

Submodules: diffcore, geometry, encodings, attention, model, dataio,
training, dynamics, evalbench, cli.  Importing the package itself does not
import numpy, so ``--threads`` can still take effect.
"""

__version__ = "0.1.0"
