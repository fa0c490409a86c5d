"""Desk-scale scene graph generation toolkit.

Bidirectional entity-predicate conditioning with iterative refinement,
masked feature distillation against a frozen teacher, Hungarian set
losses, bipartite graph assembly, and a long-tail / zero-shot recall
harness over synthetic scenes.
"""

__version__ = "0.1.0"
