"""Entity-aware sample reweighting for denoising implicit-feedback recommenders."""

__version__ = "0.1.0"
