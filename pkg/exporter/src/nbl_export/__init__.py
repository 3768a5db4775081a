"""Bridge from pretrained causal LMs to the .nbla activation dump format."""

from .export import ExportJob, ExportReport, export_activations
from .verify import VerifyReport, verify_dumps

__version__ = "0.1.0"
