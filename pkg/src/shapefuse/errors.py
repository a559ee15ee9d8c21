"""Exception hierarchy.

``UserInputError`` covers malformed inputs and files; everything deriving
from ``NumericalError`` signals a numerical failure (singular systems,
registrations that could not be completed).
"""


class ShapeFuseError(Exception):
    pass


class UserInputError(ShapeFuseError, ValueError):
    pass


class MeshError(UserInputError):
    pass


class TopologyMismatchError(UserInputError):
    pass


class NumericalError(ShapeFuseError, ArithmeticError):
    pass


class DegenerateDataError(NumericalError):
    pass


class SingularSystemError(NumericalError):
    pass


class EmbeddingError(NumericalError):
    """A point could not be embedded on a surface within the distance cap."""


class RegistrationError(NumericalError):
    pass


class DenseCapError(UserInputError):
    pass
