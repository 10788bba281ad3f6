"""Evaluate a low-carbon travel incentive on trip records: matching, staggered DiD, mode-shift carbon accounting and zone analysis."""

from . import counterfactual, did, psm, spatial, synthcity, trip_model
from .pipeline import PipelineConfig, RunReport, run

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "RunReport", "run", "counterfactual", "did", "psm", "spatial", "synthcity", "trip_model"]
