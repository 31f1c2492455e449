"""Stochastic dual dynamic programming with learned value-function warm starts."""
from .cuts import Cut, ValueFunctionApprox
from .environments import InventoryConfig, PortfolioConfig, make_inventory_instance, make_portfolio_instance
from .lp import LinearProgram, LPError, LPResult, LPStatus, solve_lp
from .msso import (ProblemInstance, ScenarioBatch, ScenarioDistribution, StageInfeasible, StageTemplate,
                   evaluate_policy, sample_scenarios)
from .sddp import StoppingRule, SddpResult, sddp_solve

__version__ = "0.1.0"
