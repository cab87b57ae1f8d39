"""Multi-hypothesis 3D face reconstruction under occlusion, at desk scale."""

__version__ = "0.1.0"
