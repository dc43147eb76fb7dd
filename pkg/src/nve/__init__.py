"""nve: joint EEG/image embedding learning and differential analysis toolkit.

A library plus CLI for training a multi-branch EEG encoder and a compact
image encoder in a siamese configuration, generating synthetic paired
datasets with planted ground truth, and attributing the learned
compatibility to image regions, EEG channels, and encoder features.
"""

__version__ = "0.1.0"
