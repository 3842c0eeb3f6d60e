# Unsupervised dynamic texture segmentation: services, CLI and batch job API
__version__ = "1.0.0"
