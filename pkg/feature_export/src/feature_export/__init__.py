from .export import ExportError, ExportResult, ExportSpec, export_video
from .sfbio import SFBReadError, VerifyReport, read_sfb_file, verify_sfb

__all__ = [
    "ExportError", "ExportResult", "ExportSpec", "export_video",
    "SFBReadError", "VerifyReport", "read_sfb_file", "verify_sfb",
]
