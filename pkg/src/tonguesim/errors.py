"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures
onto its documented status codes (1 validation, 2 numerical, 3 I/O).
"""

from __future__ import annotations


class TongueSimError(Exception):
    exit_code = 1


# -- validation (exit 1) ----------------------------------------------------

class ConfigError(TongueSimError):
    pass


class ParameterError(TongueSimError, ValueError):
    pass


class DimensionError(TongueSimError, ValueError):
    pass


class MeshStructureError(TongueSimError, ValueError):
    pass


class EmptySelectionError(TongueSimError, ValueError):
    pass


class EmptySystemError(TongueSimError, ValueError):
    pass


class PairingError(TongueSimError, ValueError):
    pass


class BindingError(TongueSimError, ValueError):
    pass


class SeedError(TongueSimError, ValueError):
    pass


# -- numerical (exit 2) -----------------------------------------------------

class NumericalError(TongueSimError):
    exit_code = 2


class DegenerateElementError(NumericalError, ValueError):
    def __init__(self, message, tets=()):
        super().__init__(message)
        self.tets = list(tets)


class InvertedElementError(NumericalError):
    def __init__(self, tets):
        self.tets = [int(t) for t in tets]
        shown = ", ".join(str(t) for t in self.tets[:20])
        more = "" if len(self.tets) <= 20 else f" (+{len(self.tets) - 20} more)"
        super().__init__(f"edit inverts {len(self.tets)} tets: {shown}{more}")


class ModalSolverError(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ConstraintRankError(NumericalError):
    def __init__(self, node_ids, message=None):
        self.node_ids = [int(i) for i in node_ids]
        super().__init__(message or f"rank-deficient constraints at nodes {self.node_ids}")


class DivergenceError(NumericalError):
    def __init__(self, frame, message=None):
        self.frame = int(frame)
        super().__init__(message or f"simulation diverged (non-finite state) at frame {self.frame}")


class SnakeNumericError(NumericalError, ValueError):
    pass


class SnakeEnergyError(NumericalError):
    pass


# -- I/O (exit 3) -----------------------------------------------------------

class InputError(TongueSimError):
    exit_code = 3


class MeshParseError(InputError, ValueError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")
