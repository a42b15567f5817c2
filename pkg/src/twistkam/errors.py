"""Exception hierarchy shared by all twistkam modules."""


class TwistKamError(Exception):
    """Base class for library errors."""


class UnknownFamily(TwistKamError, ValueError):
    pass


class InvalidParameters(TwistKamError, ValueError):
    pass


class AuditFailed(TwistKamError):
    """The generating function does not satisfy the uniform twist condition."""


class NoConvergence(TwistKamError, RuntimeError):
    """An implicit solve or minimization exceeded its iteration budget."""


class NotTransverse(TwistKamError):
    """A pushed vertical subspace is not a graph over the configuration directions."""

    def __init__(self, message, n=None):
        super().__init__(message)
        self.n = n


class NotInAubry(TwistKamError):
    pass


class AmbiguousPartner(TwistKamError):
    pass


class NotLagrangian(TwistKamError):
    pass


class GridMismatch(TwistKamError, ValueError):
    pass


class GraphRejected(TwistKamError):
    pass


class SaddleWarning(UserWarning):
    """Minimization ended on a critical point whose Hessian is not positive semidefinite."""
