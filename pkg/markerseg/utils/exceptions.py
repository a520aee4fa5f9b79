import json


class MarkerSegException(Exception):
    def __init__(self, message, extra_info=None):
        """
        Initializes a new instance of the MarkerSegException class.

        :param message: Human readable description of the failure.
        :type message: str
        :param extra_info: Additional information about the failure (paths, shapes, values).
        :type extra_info: dict
        """
        super().__init__(message)
        self.message = message
        self.extra_info = extra_info or dict()

    def __str__(self):
        """Return a JSON string representation of the exception object."""
        return json.dumps({'message': self.message, 'extra_info': self.extra_info}, default=str)

    def __repr__(self):
        """
        Return a string representation of the exception.
        """
        return f'{type(self).__name__}({self.__str__()})'


class InvalidInputError(MarkerSegException):
    """Image or logit data that cannot be processed (negative intensities, non-finite values)."""
    pass


class DegenerateInputError(MarkerSegException):
    """Input for which the requested transform is undefined, e.g. an all-zero image."""
    pass


class InvalidLabelError(MarkerSegException):
    pass


class InvalidCubeError(MarkerSegException):
    pass


class ShapeError(MarkerSegException):
    pass


class ConfigError(MarkerSegException):
    pass


class PlacementError(MarkerSegException):
    pass


class SplitError(MarkerSegException):
    pass


class ContractError(MarkerSegException):
    """A caller broke an operation's contract (augmenting test data, empty test set...)."""
    pass


class DivergenceError(MarkerSegException):
    def __init__(self, message, checkpoint_path=None, extra_info=None):
        """
        Raised when the training loss becomes non-finite.

        :param message: Description of the divergence.
        :type message: str
        :param checkpoint_path: Path of the last finite checkpoint, if one was written.
        :type checkpoint_path: str
        :param extra_info: Additional information (epoch, stage, lr).
        :type extra_info: dict
        """
        super().__init__(message, extra_info)
        self.checkpoint_path = checkpoint_path
        self.extra_info['checkpoint_path'] = checkpoint_path


class ArtifactIOError(MarkerSegException):
    def __init__(self, path, underlying_exception):
        """
        Raised when reading or writing an artifact fails.

        :param path: The failing path.
        :type path: str
        :param underlying_exception: The exception that caused this one.
        :type underlying_exception: Exception
        """
        super().__init__(
            f'I/O failure on {path}',
            {'path': str(path), 'exception': str(underlying_exception)},
        )
        self.path = str(path)
        self.underlying_exception = underlying_exception
