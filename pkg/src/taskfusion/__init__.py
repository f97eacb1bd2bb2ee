"""Task-guided multi-modal image fusion: implicit architecture search,
meta-learned initialization, saliency-weighted losses and fusion metrics."""

__version__ = "0.1.0"
