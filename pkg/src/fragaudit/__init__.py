"""fragaudit: desk-scale fragility auditing for generalization measures."""

from .rng import Rng, backend_name

__version__ = "0.1.0"
__all__ = ["Rng", "backend_name", "__version__"]
