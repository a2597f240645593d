"""Image-based retrieval of patent line drawings.

Small convnet embeddings trained with an additive angular margin,
searched by cosine similarity with optional k-reciprocal re-ranking.
Everything runs on CPU with numpy; no deep-learning framework needed.
"""

__version__ = "0.1.0"

from patret.tensor import ComputeGraph, ShapeError, Tensor

__all__ = ["Tensor", "ComputeGraph", "ShapeError", "__version__"]
