"""Deformable surface reconstruction from masked RGBD video.

Three coordinate networks (deformation, signed distance, radiance) are fit to
an RGBD sequence with unbiased volume rendering and geometry regularizers,
then triangle meshes are extracted and rendering/geometry quality evaluated.
"""

__version__ = "0.1.0"
