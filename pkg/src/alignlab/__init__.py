"""alignlab: a desk-scale sequence-transduction laboratory.

Implements an alignment-learning encoder with a frame-synchronous
cross-entropy head, RNN-T and CTC baselines, decoders with instrumented
step counts, alignment diagnostics, and a training/eval/bench CLI, all on
a minimal numpy-backed reverse-mode autodiff core.
"""

__version__ = "0.1.0"

from . import core, errors

__all__ = ["core", "errors", "__version__"]
