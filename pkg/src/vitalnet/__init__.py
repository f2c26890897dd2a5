"""Tri-modal (visual, tabular, linguistic) attention fusion for ovarian tumor classification."""

__version__ = "0.1.0"

CLASSES = (
    "mature_cystic_teratoma",
    "endometriotic_cyst",
    "serous_cystadenoma",
    "mucinous_cystadenoma",
    "thecoma_fibroma",
    "high_grade_serous_carcinoma",
)
NUM_CLASSES = len(CLASSES)
