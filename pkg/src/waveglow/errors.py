"""Exception types raised across the package.

Each carries an exit code so the command line front end can map failures
without inspecting messages.
"""


class WaveGlowError(Exception):
    exit_code = 2


class ShapeError(WaveGlowError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class DomainError(WaveGlowError, ValueError):
    """Input outside the mathematical domain of an operation (e.g. log of 0)."""


class SingularMatrixError(WaveGlowError, ArithmeticError):
    """An invertible 1x1 convolution weight has |det W| <= 1e-12."""


class NumericError(WaveGlowError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class DegenerateDirectionError(WaveGlowError, ValueError):
    """Weight-norm direction vector has (near) zero norm."""


class FormatError(WaveGlowError, ValueError):
    """A WAV, mel or checkpoint file does not conform to its format."""


class CoverageError(WaveGlowError, ValueError):
    """Mel-spectrogram does not cover the requested number of samples."""


class ConfigError(WaveGlowError, ValueError):
    """Invalid configuration key or value."""
