"""cipherbreak: learnable image encryption schemes and a diffusion attack harness."""

__version__ = "0.1.0"

from .ciphers import SchemeConfig, decrypt, encrypt
from .errors import CipherbreakError, DataError, NumericError
from .rng import MasterKey, derive_stream

__all__ = [
    "CipherbreakError",
    "DataError",
    "MasterKey",
    "NumericError",
    "SchemeConfig",
    "__version__",
    "decrypt",
    "derive_stream",
    "encrypt",
]
