"""Dual self-supervised single-source generalization for 3D segmentation.

Global-feature contrastive learning steered by a centerline prior plus a
local image-restoration auxiliary task steered by flip-ensemble uncertainty,
trained on one synthetic source style and evaluated on unseen styles.
"""

__version__ = "0.1.0"
