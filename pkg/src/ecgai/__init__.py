"""ECG segmentation (U-net + HMM), interval measurement, 725-feature profiles and GBM models."""
from .core import (LEADS, N_CLASSES, EcgRecord, LabelSequence, LeadId, SegmentClass,
                   extract_window, resample_to_1khz)

__version__ = "0.1.0"

__all__ = ["LEADS", "N_CLASSES", "EcgRecord", "LabelSequence", "LeadId", "SegmentClass",
           "extract_window", "resample_to_1khz", "__version__"]
