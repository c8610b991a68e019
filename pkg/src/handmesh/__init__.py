"""Hand mesh recovery from image-like feature maps.

A keypoint-guided token generator feeds a cascaded upsampling regressor
that grows a coarse token set into a full 778-vertex hand mesh. Training
and evaluation run on a procedurally generated articulated-hand dataset.
"""

from .autograd import Tape, Tensor

__all__ = ["Tape", "Tensor"]
__version__ = "0.1.0"
