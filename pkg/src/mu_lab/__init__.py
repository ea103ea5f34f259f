"""Numerical laboratory for nonuniform dichotomies of delay equations.

Submodules follow the pipeline order: growth_rate (admissible weights),
phase_space (segments), dde_core (integration), dichotomy (projections and
bound certificates), admissibility (scalar hypotheses), conjugacy
(fixed-point construction of the correction field), cli_report (scenario
runner).
"""

from . import (  # noqa: F401
    admissibility,
    cli_report,
    conjugacy,
    dde_core,
    dichotomy,
    errors,
    growth_rate,
    phase_space,
)

__all__ = [
    "admissibility",
    "cli_report",
    "conjugacy",
    "dde_core",
    "dichotomy",
    "errors",
    "growth_rate",
    "phase_space",
]
