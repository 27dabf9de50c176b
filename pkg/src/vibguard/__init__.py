"""vibguard: visual imperceptible bounds, attack scoring, and bounded-noise distillation."""

__version__ = "0.1.0"

from .data import Dataset, load_cifar10, load_mnist, subsample  # noqa: E402
from .vib import VibTable, compute_vib_table, l1_distance  # noqa: E402

__all__ = ["Dataset", "load_mnist", "load_cifar10", "subsample", "VibTable",
           "compute_vib_table", "l1_distance", "__version__"]
