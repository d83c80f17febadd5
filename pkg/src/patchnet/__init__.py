"""Patch-averaging binary image classifier with per-pixel probability heatmaps.

A shared convolutional subnet scores every patch of an image with a class-1
probability; the image-level prediction is the plain average of those patch
probabilities, which forces the subnet to flag every locally indicative
feature rather than a single decisive one.  Subpackages cover the numeric
substrate (`tensor`), the subnet and its analytic gradients (`nn`), training
(`optim`), chunking/aggregation/heatmaps (`patchcore`), closed-form
convergence oracles and synthetic data (`analysis`), preprocessing
(`imaging`), mask-overlap statistics (`metrics`), checkpoint persistence
(`checkpoint`), and the command-line surface (`cli`).
"""

__version__ = "0.1.0"
