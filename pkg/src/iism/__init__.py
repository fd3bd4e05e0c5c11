"""Synthetic segmentation masks from a label-map VAE and a prompt-conditioned latent diffusion model.

Modules:

* :mod:`iism.labels`, :mod:`iism.fileformat`: label space, one-hot codec, IISM1/PNG I/O
* :mod:`iism.phantom`: procedural head-slice phantoms with optional infarcts
* :mod:`iism.dataset`: manifests, patient splits, lesion-weighted sampling
* :mod:`iism.vae`: the mask VAE and its training loop
* :mod:`iism.diffusion`: noise schedule, denoiser, training and ancestral sampling
* :mod:`iism.metrics`: class distributions, total variation, Fréchet distance
* :mod:`iism.store`: checkpoint persistence and corpus export
* :mod:`iism.cli`: the ``iism`` command
"""

from .errors import IISMError
from .labels import DEFAULT_CATALOG, LESION_CLASS, NUM_CLASSES, ClassCatalog

__version__ = "0.1.0"

__all__ = ["ClassCatalog", "DEFAULT_CATALOG", "IISMError", "LESION_CLASS", "NUM_CLASSES", "__version__"]
