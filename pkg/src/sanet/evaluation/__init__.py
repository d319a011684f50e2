"""FID, GLCM nuclei texture, JS divergence, blank-region deviation and Grad-CAM."""

from .blank import BlankDeviation, blank_region_deviation
from .divergence import js_divergence, sample_js
from .fid import ActivationStats, RandomConvFeatures, activation_stats, fid
from .gradcam import Heatmap, grad_cam
from .texture import GLCMFeatures, extract_nuclei_crops, feature_stats, glcm_features, glcm_matrix

__all__ = [
    "ActivationStats", "BlankDeviation", "GLCMFeatures", "Heatmap", "RandomConvFeatures",
    "activation_stats", "blank_region_deviation", "extract_nuclei_crops", "feature_stats", "fid",
    "glcm_features", "glcm_matrix", "grad_cam", "js_divergence", "sample_js",
]
