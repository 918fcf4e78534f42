"""Toy object detectors on synthetic shape scenes, and tools to invert them.

The package trains small single- and two-stage detectors on a generated
dataset of colored geometric shapes, then synthesizes images the trained
detectors recognize as containing a requested scene layout by alternating
between image gradient steps and pseudo-target projections.  On top of that
sit introspection protocols: inversion transfer matrices, loss
disentanglement, saliency attribution, emergent-context statistics, and
anchor scale sweeps.
"""

from .geometry import (
    AnchorGrid,
    Box,
    Detection,
    Layout,
    build_anchor_grid,
    decode_boxes,
    encode_boxes,
    giou,
    iou,
    match_by_iou,
    nms,
    scale_bucket,
)

__version__ = "0.1.0"
