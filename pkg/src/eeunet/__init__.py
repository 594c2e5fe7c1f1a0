"""Edge-enhanced U-Net for 4-class cardiac MRI segmentation."""

__version__ = "0.1.0"
