"""Figure rendering for the laboratory's CSV and snapshot outputs."""

from vpsplots.figures import FigureSpec, MalformedInput, plot

__all__ = ["FigureSpec", "MalformedInput", "plot"]
