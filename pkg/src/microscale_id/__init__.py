"""Two-stage inverse identification of porous microstructure.

Stage 1 recovers the effective gradient-elastic moduli (lambda, mu, l) of a
cantilever from its top-surface deflections; stage 2 recovers the pore
diameter and volume fraction whose second-order homogenized tangents match.
"""
__version__ = "0.1.0"

from .errors import (GeometryError, MicroscaleError, ObjectiveError, PackingError,
                     ParameterError, SolveError)
from .voigt import (GradientModuli, IsotropicModuli, gradient_d, isotropic_c,
                    lame_from_engineering)
from .macro import (MacroField, MacroMesh, MacroProblem, MeasurementSet, assemble_and_solve,
                    build_cantilever, element_stiffness, sample_top_surface)
from .bell import bell_basis
from .rve import CircleSet, MaterialGrid, RveSpec, export_image, rasterize, rsa_pack
from .micro import MacroStrainState, MicroMesh, build_micro_mesh, solve_rve
from .homogenize import Tangents, extract_length_scale, homogenize
from .inverse import (Alpha, Beta, OptimResult, corrupt, fd_gradient, identify_macro,
                      identify_micro, minimize, psi1, psi2)
