"""Age-of-Information offloading: solvers, index policies, and simulator."""

__version__ = "0.1.0"
