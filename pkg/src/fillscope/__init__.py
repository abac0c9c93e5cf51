"""Fill-side behavioral analytics for on-chain prediction-market order flow.

The package is organized as a batch pipeline::

    ingest -> gates -> features -> cluster -> tiers -> metrics
           -> bilateral -> detect -> report -> bundle

Each stage lives in its own module and can be used as a library; the
``fillscope`` console script (see :mod:`fillscope.cli`) wires them together.
"""

__version__ = "0.1.0"
