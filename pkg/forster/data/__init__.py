"""Data layer: file formats and named instances."""
