"""Render MSE-vs-SNR figures from sweep result CSVs.

Input is the sweep CSV schema
(snr_db,variant,mse_theta_deg2,crb_deg2,mean_iterations,n_trials,failures);
output is one figure per requested style: the full algorithm comparison, or
the block-mask vs diagonal-mask comparison.
"""

from .plots import PlotSpec, REQUIRED_COLUMNS, SchemaError, build_figure, load_rows, render

__all__ = [
    "PlotSpec",
    "REQUIRED_COLUMNS",
    "SchemaError",
    "build_figure",
    "load_rows",
    "render",
]

__version__ = "0.1.0"
