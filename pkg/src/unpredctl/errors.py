"""Exception hierarchy shared by the solver, rollout and CLI layers."""


class UnpredError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(UnpredError, ValueError):
    pass


class HorizonError(UnpredError, IndexError):
    pass


class ParameterError(UnpredError, ValueError):
    pass


class SolverDegeneracyError(UnpredError, ArithmeticError):
    """A backward-recursion Hessian P_k failed its positive-definiteness test."""

    def __init__(self, k, detail=""):
        self.k = k
        msg = f"P_{k} is not positive definite"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class OverConstrainedError(UnpredError, ValueError):
    """The perturbation support leaves no room for the mean under the input bound."""

    def __init__(self, k, i, mu_bar):
        self.k, self.i, self.mu_bar = k, i, mu_bar
        super().__init__(
            f"mean bound at step {k}, channel {i} is negative ({mu_bar:.6g}); "
            "lower tau or lambda3, or raise the input bound"
        )


class CapacityError(UnpredError, RuntimeError):
    pass


class FilterDegeneracyError(UnpredError, ArithmeticError):
    pass
