"""Desk-scale 4D scene editing.

A factored dynamic radiance field (flow into a canonical space, both stored
as products of 2D feature planes) is pretrained on multi-view video, then
edited either by direct supervision from a 2D image editor (baseline) or by
distilling the editor into a GAN that refines the renders (control4d mode).
"""

__version__ = "0.1.0"

from control4d.errors import (
    ConfigError,
    EditorTransportError,
    EmptyConditionError,
    NumericalError,
    SchemaError,
    ValidationError,
)

__all__ = [
    "ConfigError",
    "EditorTransportError",
    "EmptyConditionError",
    "NumericalError",
    "SchemaError",
    "ValidationError",
    "__version__",
]
