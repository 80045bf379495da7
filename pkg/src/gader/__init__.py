"""Gait detection and recognition from silhouette sequences, with a small numpy autodiff core.

Modules: ``synth`` (procedural walkers), ``silio`` (mask I/O and normalization),
``dhs`` (knee-row signatures), ``tensor`` (autodiff), ``detector``, ``gar``
(recognition), ``evalkit`` (metrics) and ``cli``.
"""
__version__ = "0.1.0"
