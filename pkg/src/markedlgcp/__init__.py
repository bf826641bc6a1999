"""Marked log-Gaussian Cox process small-area estimation from geo-referenced surveys."""
from .errors import (
    DesignError,
    FemAssemblyError,
    InvalidDomainError,
    MarkedLgcpError,
    ModelDataError,
    NonConvergenceError,
    NumericalDegeneracyError,
    SurfaceError,
)
from .inference import HyperGrid, explore_hyper, fit, sample_posterior, score_model
from .mesh import DomainPolygon, Mesh, build_mesh, fem_matrices
from .model import JointModel, LatentVariant, MarkedSample, build_joint_model, joint_loglik
from .predict import FitSpec, area_moments, fit_sample, holdout_validate, predict_regions
from .spde import InterpretableParams, PcPrior
from .surface import PixelGrid, Surface
from .survey import DesignSpec, Population, PopulationConfig, generate_population, ht_estimate, run_survey

__version__ = "0.1.0"
