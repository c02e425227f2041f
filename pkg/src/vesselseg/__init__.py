"""Vessel segmentation pipeline for X-ray angiograms.

Three stages: multichannel contrast enhancement, an encoder-decoder
network whose decoder uses polynomial (generative-neuron) convolutions,
and classical mask refinement. Includes a topology-aware evaluation
harness and a synthetic vessel phantom generator for desk-scale
experiments.
"""

__version__ = "0.1.0"
