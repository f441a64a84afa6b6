"""CliqueNet: clique blocks with alternately updated, weight-shared layers.

Heavy submodules import numpy; this package root stays import-light so the
CLI can cap thread counts before numpy loads.
"""

__version__ = "0.1.0"
