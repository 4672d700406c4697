"""recdiff: sequential recommendation with dual-view item embeddings,
intent prototypes, and diffusion-generated contrastive augmentations."""

__version__ = "0.1.0"
