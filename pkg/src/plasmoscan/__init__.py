"""Malaria blood-smear screening pipeline.

Preprocessing, tiny CNN classifiers, sliding-window localization, Grad-CAM
heatmaps, int8 quantization, and a CLI/HTTP gateway.
"""

__version__ = "0.1.0"
