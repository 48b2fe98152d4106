"""Dynamic-scene view synthesis with static/dynamic decomposition.

Two radiance fields (a latent-conditioned static background field and a
time-conditioned dynamic field) are trained jointly and blended per ray by a
learned occlusion-weight module. Everything runs on a small numpy-based
reverse-mode autodiff engine; ground truth comes from a built-in synthetic
ray tracer.
"""

__version__ = "0.1.0"
