"""Transfer learning from a pretrained EHR time-series imputer to mortality classifiers."""

__version__ = "0.1.0"
