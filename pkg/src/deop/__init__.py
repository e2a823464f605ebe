"""One-pass open-vocabulary segmentation at desk scale.

A small ViT encoder with patch severance and visual prompts, a class-agnostic
mask proposal network, anchor-heatmap pooling and class-embedding
classification, trained and evaluated on procedurally generated shapes.
"""

__version__ = "0.1.0"
