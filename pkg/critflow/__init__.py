# flake8: noqa: F401
from __future__ import annotations

from ._critical_atlas import Atlas
from ._critical_atlas import build_atlas
from ._critical_atlas import classify
from ._critical_atlas import ComponentRef
from ._critical_atlas import components_at
from ._critical_atlas import continue_branch
from ._critical_atlas import CriticalBranch
from ._critical_atlas import CriticalPoint
from ._critical_atlas import find_critical
from ._critical_atlas import lift
from ._critical_atlas import lusin_diagnostic
from ._critical_atlas import trace_continuum
from ._critical_atlas import transversality
from ._critical_atlas import TransversalityReport
from ._energy_model import builtin
from ._energy_model import BUILTIN_NAMES
from ._energy_model import check_consistency
from ._energy_model import EnergyModel
from ._energy_model import sample
from ._energy_model import shifted_energy
from ._energy_model import slope
from ._exceptions import ConfigError
from ._exceptions import ContinuationError
from ._exceptions import CritflowException
from ._exceptions import DimensionMismatchError
from ._exceptions import InvalidParamsError
from ._exceptions import ModelError
from ._exceptions import NewtonDivergenceError
from ._exceptions import PandasNotSupported
from ._exceptions import StepSizeError
from ._exceptions import SweepError
from ._export import Output
from ._export import trajectory_table
from ._flow_integrator import descend
from ._flow_integrator import dissipation_measure
from ._flow_integrator import energy_identity_residual
from ._flow_integrator import FlowConfig
from ._flow_integrator import integrate
from ._flow_integrator import Trajectory
from ._genericity_lab import perturb
from ._genericity_lab import Perturbation
from ._genericity_lab import sample_test
from ._transition_cost import cost
from ._transition_cost import CostResult
from ._transition_cost import direct_minimization
from ._transition_cost import heterocline
from ._transition_cost import reparameterize
from ._transition_cost import TransitionCurve
from ._transition_cost import TransitionGraph
from ._viscosity_limit import dissipation_localization
from ._viscosity_limit import extract_limit
from ._viscosity_limit import graph_hausdorff
from ._viscosity_limit import JumpRecord
from ._viscosity_limit import LimitEstimate
from ._viscosity_limit import sweep
from ._viscosity_limit import SweepResult
from .critflow import load_config
from .critflow import run
from .critflow import RunConfig


__version__ = '0.1.0'
