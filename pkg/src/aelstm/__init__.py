"""Tactile autoencoders, modality attention and a loop-constrained LSTM for
switching between sub-task motions in a simulated cap-opening task."""

__version__ = "0.1.0"
