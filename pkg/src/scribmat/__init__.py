"""Guided-scribble interactive image matting.

Pipeline: over-segment -> score regions -> collect scribbles -> propagate
labels over the superpixel graph (absorbing chain + per-image CNN) ->
synthesize a trimap -> solve the alpha matte.
"""

__version__ = "0.1.0"
