"""Multimodal encoder-decoder pipeline for visual commonsense generation.

Submodules are imported lazily by the CLI so that thread limits can be set
before numpy loads; import the pieces you need directly, e.g.
``from vcgen.tensor import Tensor, Tape``.
"""

__version__ = "0.1.0"
