"""Particle filters for estimating a time-varying number of current dipoles from MEG data."""

from .estimators import PosteriorSummary, representative_set, summarize
from .forward import GeometryConfig, Leadfield, build_geometry, compute_leadfield, predict_field
from .metrics import DipolePointSet, adct, ospa, sd, wm
from .model import NAM, Dipole, DipoleState, ModelParams, estimate_noise
from .proposals import ProposalParams, TikhonovOperator
from .smc import FilterConfig, FilterOutput, NumericalCollapse, ParticleFilter, run
from .synthgen import ScenarioConfig, generate

__all__ = [
    "NAM", "Dipole", "DipolePointSet", "DipoleState", "FilterConfig", "FilterOutput", "GeometryConfig",
    "Leadfield", "ModelParams", "NumericalCollapse", "ParticleFilter", "PosteriorSummary", "ProposalParams",
    "ScenarioConfig", "TikhonovOperator", "adct", "build_geometry", "compute_leadfield", "estimate_noise",
    "generate", "ospa", "predict_field", "representative_set", "run", "sd", "summarize", "wm",
]
