"""Annotation-free road curb detection from LiDAR altitude difference images."""

__version__ = "0.1.0"
