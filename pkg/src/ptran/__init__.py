"""Sentence encoder from a CRF over word labels and dependency heads, solved by mean field inference.

Submodules are imported on demand so that ``ptran.cli`` can cap BLAS threads
before numpy loads.
"""

__version__ = "0.1.0"
