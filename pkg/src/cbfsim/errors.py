"""Exception types shared across the package."""


class CbfsimError(Exception):
    """Base class for all package-specific errors."""


class FieldEvaluationError(CbfsimError):
    """A scalar field or its gradient produced a non-finite value."""

    def __init__(self, field_name, x, detail=""):
        self.field_name = field_name
        self.x = x
        msg = f"evaluation of field '{field_name}' failed at state {x}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class BoundaryViolationError(CbfsimError):
    """A reciprocal barrier was evaluated at or past the set boundary."""

    def __init__(self, h_value, field_name="h"):
        self.h_value = h_value
        self.field_name = field_name
        super().__init__(
            f"reciprocal barrier over '{field_name}' evaluated with "
            f"h = {h_value:.6g} <= interior floor"
        )


class SafetyDomainError(CbfsimError):
    """The controller was asked to act at a state outside the safe set."""

    def __init__(self, detail, h_value=None):
        self.h_value = h_value
        super().__init__(detail)


class RelativeDegreeError(CbfsimError):
    """Numeric relative-degree precondition failed."""

    def __init__(self, detail, offending_states=None):
        self.offending_states = offending_states or []
        super().__init__(detail)


class DescriptorError(CbfsimError):
    """A safe-set descriptor produced samples inconsistent with its own h."""


class InfeasibleError(CbfsimError):
    """A constraint set admits no solution."""

    def __init__(self, detail, certificate=None):
        self.certificate = certificate
        super().__init__(detail)


class RiccatiError(CbfsimError):
    """The algebraic Riccati solve did not converge."""

    def __init__(self, detail, residual_history=None):
        self.residual_history = residual_history or []
        super().__init__(detail)


class NumericBlowupError(CbfsimError):
    """Integration or an ODE solve produced non-finite values."""

    def __init__(self, detail, last_valid_t=None):
        self.last_valid_t = last_valid_t
        super().__init__(detail)


class OperatingBoxError(CbfsimError):
    """A state left the declared operating box of its system."""

    def __init__(self, x, lo, hi, system_name="system"):
        self.x = x
        super().__init__(
            f"state {x} of '{system_name}' left the declared operating box "
            f"[{lo}, {hi}]; refusing to extrapolate"
        )


class ScenarioError(CbfsimError):
    """A scenario document is malformed or inconsistent."""

    def __init__(self, detail, path=None, line=None):
        self.path = path
        self.line = line
        loc = ""
        if path is not None:
            loc = f"{path}:"
            if line is not None:
                loc += f"{line}:"
            loc += " "
        super().__init__(loc + detail)
