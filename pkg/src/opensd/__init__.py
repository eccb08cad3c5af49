"""Open-vocabulary segmentation and detection with decoupled thing/stuff decoding."""
