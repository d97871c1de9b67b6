"""Hybrid physics/data toolkit for composite prepreg tape deformation.

Subpackages cover separated-representation thermal solvers, an orthotropic
Kelvin-Voigt finite-element solver, DMA-based parameter identification,
stabilized neural-ODE strain models, micromechanics, and a CLI pipeline
that composes them into an end-to-end tape-width predictor.
"""

__version__ = "0.1.0"
