"""Fruit segmentation, detection and yield mapping for orchard imagery.

Submodules are imported on demand so that the command line can set the
BLAS thread count before numpy loads.
"""

__version__ = "0.1.0"
