"""Audio event detection benchmark: MFCC -> GMM features -> kernel SVM -> AP / DET-AUC."""

__version__ = "0.1.0"
