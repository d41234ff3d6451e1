"""rgbh: RGB + height multi-modal segmentation toolkit.

A desk-scale, CPU-only stack for studying how RGB imagery and height maps
(nDSM) should be fused for semantic segmentation: a small tensor engine
with reverse-mode differentiation, transformer and convolutional
backbones, six fusion paradigms including intermediary-token fusion, a
LiDAR-to-nDSM rasterization pipeline, dataset statistics, a synthetic
benchmark generator, and a deterministic training/evaluation harness.
"""

__version__ = "0.1.0"

CLASS_NAMES = ("ground", "low_vegetation", "building", "water", "road", "tree")
REPORT_CLASS_NAMES = ("Ground", "Vegetation", "Building", "Water", "Road", "Tree")
NUM_CLASSES = len(CLASS_NAMES)
IGNORE_INDEX = 255
