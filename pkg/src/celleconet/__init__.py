"""Cell-aware multiple-instance learning for recurrence prediction from slide embeddings."""

__version__ = "0.1.0"

from .cohort import CellType, Cohort, Patient, PatchRecord, Slide, load_cohort, save_cohort  # noqa: E402,F401
