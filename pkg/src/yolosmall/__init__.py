"""Small-object YOLO variants: graph definitions, static analysis, a CPU
forward pass, tiled inference, anchor clustering and detection metrics."""

__version__ = "0.1.0"
