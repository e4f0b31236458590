"""carnot-kit: computation on stratified Lie groups in exponential coordinates."""

from .algebra import (
    AlgebraVector,
    StratificationSpec,
    StructureError,
    bracket,
    bracket_coords,
    homogeneous_dimension,
    list_groups,
    load_group,
    load_spec_file,
    project_stratum,
    validate_stratification,
)

__version__ = "0.1.0"
