"""TSViT segmentation with parameter-efficient fine-tuning, on a numpy autodiff core."""

__version__ = "0.1.0"
