"""Numerical search for isometry-invariant geodesics on small model manifolds."""

from .catalog import build_isometry, build_model, catalog_entry, catalog_names
from .errors import (AllPointsFixed, ConfigurationError, ConstructionError, InvalidPointError, InvariantViolation,
                     InvgeoError, MissingPeriodError, NonConvergenceError, NotAnIsometryError,
                     OutOfInjectivityError, RefinementError, StudyInapplicableError, SubdivisionTooCoarseError)
from .geometry import FlatTorus, Product, RoundRP2, WarpedTorus, geodesic_shoot, shoot_boundary_value
from .isometry import (Isometry, check_isometry, fixed_points, homotopy_regularize, identity, product,
                       rotation_map, rp2_rotation, torus_affine, translation)
from .minimax import (MinimaxConfig, bangert_excess_study, bangert_iterate_path, construct_class_loop,
                      glue_invariant_path, minimax_descend, nice_loop_normalize, rp2_generator, sweep_loop)
from .pathspace import (ClassLabel, InvariantPath, LoopPath, average_energy, class_label, discrete_energy,
                        iota_map, iterate, nu_map, period_detect, straight_path)
from .solver import DescentConfig, census, index_growth, minimize_in_class, refine_and_classify

__version__ = "0.1.0"
