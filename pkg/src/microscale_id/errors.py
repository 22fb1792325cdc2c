"""Exception hierarchy shared by the solver, generator and inverse modules."""


class MicroscaleError(Exception):
    """Base class for all package errors."""


class ParameterError(MicroscaleError, ValueError):
    """A physical or numerical parameter is outside its valid domain."""


class GeometryError(MicroscaleError):
    """Degenerate element or mesh geometry."""


class SolveError(MicroscaleError):
    """Linear system could not be factorized or solved to tolerance."""


class PackingError(MicroscaleError):
    """Random sequential adsorption could not place the requested circles."""


class ObjectiveError(MicroscaleError):
    """An objective function could not be evaluated at the requested point."""
