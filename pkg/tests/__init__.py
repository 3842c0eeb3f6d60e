# Test suite for the dynamic texture segmentation package
