"""Weakly supervised region proposal network trained from image labels only.

Dense patch and soft-ROI branches are trained jointly with multiple-instance
BCE, supervised-contrastive, and cross-branch consistency losses on top of a
from-scratch numpy autodiff engine.
"""

__version__ = "0.1.0"
