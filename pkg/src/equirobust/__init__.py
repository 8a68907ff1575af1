"""
equirobust: equivariant CNNs and their adversarial robustness, from a small
numpy autodiff engine up to attacks, certified radii and a run pipeline.
"""

__version__ = "0.3.0"
