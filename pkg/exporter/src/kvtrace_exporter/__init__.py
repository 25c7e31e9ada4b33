"""kvtrace-exporter: dump pretrained-model attention into KVTR traces."""

from .exporter import DEFAULT_MARKER, ExportError, ExportJob, export
from .kvtr import write_kvtr

__version__ = "0.1.0"
