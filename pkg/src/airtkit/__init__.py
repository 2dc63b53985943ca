"""Active infrared thermography toolkit.

Synthetic pulsed-thermography sequences, classical compression baselines
(PCA, TSR, PPT), a masked CNN-attention autoencoder with PCA distillation,
and defect-visibility metrics, all desk-scale and fully deterministic.
"""

__version__ = "0.1.0"
