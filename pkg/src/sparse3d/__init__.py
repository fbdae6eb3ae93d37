"""Sparse-view 3D object reconstruction at desk scale.

Submodules:
    geometry     cameras, rays, projections
    scenes       synthetic multi-view datasets with exact ground truth
    field        hash-grid radiance field + differentiable volume rendering
    epipolar     feature renderer (epipolar tokens -> attention aggregation)
    diffusion    DDPM schedule, conditional denoisers, joint training
    distill      score-distillation reconstruction loop
    meshmetrics  marching cubes, chamfer/F-score, PSNR/SSIM
    cli          command-line entry point
"""

__version__ = "0.1.0"
