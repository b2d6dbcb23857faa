"""Exception hierarchy shared across the toolkit."""


class HeatgridError(Exception):
    """Base class for all toolkit errors."""


class ParseError(HeatgridError):
    """Network file is not valid JSON or violates the schema."""


class UnitConventionError(HeatgridError):
    """Required unit/field information is missing from a network file."""


class ValidationError(HeatgridError):
    """One or more model invariants are violated.

    Carries the full list of defects so a file with k independent
    problems reports all k at once.
    """

    def __init__(self, defects):
        if isinstance(defects, str):
            defects = [defects]
        self.defects = list(defects)
        super().__init__("; ".join(self.defects))


class EmptyRegion(HeatgridError):
    """CHP operating polygon has no feasible point."""


class UnboundedRegion(HeatgridError):
    """CHP operating polygon has a recession direction."""


class UnsupportedVariant(HeatgridError):
    """Unknown model variant selector."""


class InfeasibleBoundsError(HeatgridError):
    """A derived variable bound interval is empty."""


class EmptyBox(HeatgridError):
    """A McCormick box has lo > hi."""


class MissingNominalFlow(HeatgridError):
    """Constant-flow variant requested but a pipe lacks m_nominal."""


class DimensionMismatch(HeatgridError):
    """Point/instance dimensions do not line up."""


class NotOptimal(HeatgridError):
    """Dual extraction requested on a non-optimal solution."""


class NumericalFailure(HeatgridError):
    """KKT factorization broke down after regularization retries."""


class NoFeasibleIncumbent(HeatgridError):
    """Branch-and-bound proved a bound but found no feasible point."""


class FixedFlowInfeasible(HeatgridError):
    """Flows fixed by the repair step cannot serve the loads."""
