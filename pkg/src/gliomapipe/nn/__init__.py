"""Minimal NumPy tensor engine for the encoder-decoder network."""

from .layers import BatchNorm2d, Conv2d, ConvBlock, ConvTranspose2x2
from .loss import DEFAULT_CLASS_WEIGHTS, softmax, softmax_weighted_ce
from .optim import AdamState, adam_step, xavier_bound, xavier_init

__all__ = [
    "AdamState",
    "BatchNorm2d",
    "Conv2d",
    "ConvBlock",
    "ConvTranspose2x2",
    "DEFAULT_CLASS_WEIGHTS",
    "adam_step",
    "softmax",
    "softmax_weighted_ce",
    "xavier_bound",
    "xavier_init",
]
