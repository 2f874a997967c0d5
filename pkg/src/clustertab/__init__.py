"""Table detection and structure recognition by supervised clustering of OCR words."""

__version__ = "0.1.0"
