"""Open-vocabulary shape detection toolkit.

A frozen contrastive dual encoder provides region and class-name
embeddings; a DETR-style localizer with anchor-box queries is
pre-matched to classes before decoding; detection scores fuse box
matchability with region classification.
"""

__version__ = "0.1.0"
