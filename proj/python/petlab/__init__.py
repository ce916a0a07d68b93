"""Desk-scale parameter-efficient transfer learning lab.

Thin re-export of the compiled core: float64 tensor ops with taped
reverse-mode autodiff, synthetic task generators, PIMG1 corpus IO, and
the experiment entry points (pretrain, run_matrix, ablations, data-scale
sweep, gradcheck, param_counts).
"""

from petlab._core import *  # noqa: F401,F403
from petlab._core import __version__  # noqa: F401
