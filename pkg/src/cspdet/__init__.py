"""Two-stage instance segmentation: CSP-EfficientNet+SAM backbone, NAS-FPN, Dice-loss mask head."""
__version__ = "0.1.0"
