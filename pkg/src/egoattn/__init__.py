"""Attention-driven convolutional-LSTM activity recognizer.

Two-stream (RGB appearance + stacked optical flow) design on a minimal
float64 autodiff core, with a bundled synthetic activity-video generator so
everything is trainable and verifiable at desk scale.
"""

__version__ = "0.1.0"
