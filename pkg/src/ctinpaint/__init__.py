"""Score-based inpainting of cone-beam projection images.

Submodules
----------
projector  cone-beam forward projection, procedural phantoms, masks
sde        variance-exploding noise schedule and reverse-time step
score      analytic and learned score models, denoising score matching
sampler    predictor-corrector sampling
inpaint    conditional resampling and the interpolation baseline
metrics    masked MAE / PSNR and report tables
config     experiment configuration
cli        command-line entry point
"""

__version__ = "0.1.0"
