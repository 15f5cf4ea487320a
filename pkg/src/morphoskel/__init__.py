"""Morpho-skeletal control for coronary segmentation-map diffusion.

Label volumes, containment checks, morphology and skeleton regressors, a
reference EDM sampler with guidance strategies, evaluation metrics and a
phantom generator.
"""

__version__ = "0.1.0"
