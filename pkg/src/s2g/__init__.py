"""Select-to-guide multi-hop reading comprehension at desk scale.

A cascaded evidence-paragraph retriever (score matching, score refinement,
cascaded re-ranking) and a multi-task reader (sentence-aware self-attention,
evidence-guided attention) built on a self-contained float64 autodiff core.
"""

from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
