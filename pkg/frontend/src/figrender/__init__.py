from figrender.render import FIGURES, PlotSpec, SchemaError, build_figures, render

__version__ = "0.1.0"
