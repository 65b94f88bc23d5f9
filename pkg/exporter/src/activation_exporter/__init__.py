"""Exports ResNet34 activations into the protoexplain dataset format."""

from .export import ExportSpec, export

__version__ = "0.1.0"
