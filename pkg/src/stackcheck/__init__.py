"""Stack buffer-overflow detection, patching and validation for
disassembled x86-64 programs."""

__version__ = "0.1.0"
