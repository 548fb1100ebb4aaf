"""Cross-modal 4D annotation engine.

Turns camera masklets, LiDAR sweeps, ego poses and object boxes into
temporally consistent camera-LiDAR masklets, with evaluation metrics and
interactive prompting protocols on top.
"""

__version__ = "0.1.0"
