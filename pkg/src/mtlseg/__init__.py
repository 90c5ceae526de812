"""Multi-task segmentation and area regression with learned task uncertainties."""

__version__ = "0.1.0"
