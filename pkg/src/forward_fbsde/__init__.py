"""Forward performance processes in a one-factor incomplete market.

Submodules: ``market`` (model and path simulation), ``forward_core``
(forward utility fields and their conjugates), ``ergodic`` (long-run
growth solver), ``fbsde`` (primal and dual solvers, verification),
``oce`` (forward optimized certainty equivalents) and ``cli``.
"""

__version__ = "0.1.0"
