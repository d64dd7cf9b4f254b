"""keyreg - detector-agnostic keypoint registration of retinal fundus images."""

__version__ = "1.0.0"
__author__ = "keyreg Contributors"
__description__ = "Keypoint detection, dense descriptors and homography registration for fundus images"
