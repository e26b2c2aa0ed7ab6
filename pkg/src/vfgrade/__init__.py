"""Vertebral fracture grading with supervised contrastive learning on 3D CT patches."""

__version__ = "0.1.0"
