"""Deep heterogeneous heatmap ensembles for gaze estimation."""

__version__ = "0.1.0"
