"""PyTorch-side exporter for the cdisco activation-dump contract."""

from .export import ExportConfig, export, load_dataset_dir
from .writer import read_cdad, write_cdad, write_dump_dir

__version__ = "0.1.0"

__all__ = ["ExportConfig", "export", "load_dataset_dir", "read_cdad",
           "write_cdad", "write_dump_dir"]
