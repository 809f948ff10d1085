"""Multimodal grasp classification from forearm sEMG and gaze tracking."""

__version__ = "0.1.0"
