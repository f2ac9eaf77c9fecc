"""Spatial attention with squeeze-and-excitation channel recalibration.

A small numpy autodiff core (:mod:`seanet.tensor`), the network blocks and
their four SE placements (:mod:`seanet.nn`), the weighted cross-entropy plus
center loss (:mod:`seanet.losses`), SGD training (:mod:`seanet.optim`,
:mod:`seanet.train`), evaluation metrics (:mod:`seanet.metrics`) and the
retina preprocessing pipeline (:mod:`seanet.data`).
"""

__version__ = "0.1.0"
