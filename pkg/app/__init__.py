"""
maldnerf

Radiance-field object removal driven by a latent-diffusion inpainting prior,
masked patch-adversarial training, iterative dataset updates and depth-ranking
supervision, with a desk-scale evaluation suite on synthetic scenes.
"""

__version__ = "0.1.0"
__description__ = "Desk-scale radiance-field inpainting with a diffusion prior"
