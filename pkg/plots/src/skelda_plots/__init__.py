"""Figure rendering for the twin-experiment CSV exports."""

from .render import PlotSpec, SchemaError, render

__all__ = ["PlotSpec", "SchemaError", "render"]
