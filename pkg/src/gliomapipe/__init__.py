"""Glioma segmentation and survival-prediction toolkit.

Stages: intensity standardization, a 2-D encoder-decoder FCNN trained from
scratch on axial slices, 3-D connected-component cleanup, first-order and
shape radiomics, and gradient-boosted survival regression.
"""

__version__ = "0.1.0"
