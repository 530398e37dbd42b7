"""Landmark-guided cropping for GAN-based data augmentation of small pet-face datasets."""

from .dataset import ContaminationError, DatasetManifest, ManifestError, Record
from .schema import CropBox, LandmarkSet

__all__ = ["ContaminationError", "CropBox", "DatasetManifest", "LandmarkSet", "ManifestError", "Record"]
__version__ = "0.1.0"
