"""Differentiable MPM laboratory for residual neural material models."""

from . import diff, fit, mpm, particle_gs, scene
from .constitutive import Material, MaterialAdapter, compose_material, pretrain_base
from .errors import (CatalogError, CompositionError, DifferentiationError, DomainError,
                     FormatError, GeometryError, InversionError, MatgroundError,
                     OutOfDomainError, TrainingError)
from .mpm import Trajectory, simulate, step
from .scene import ParticleSet, SceneConfig, make_benchmark

__all__ = [
    "diff", "fit", "mpm", "particle_gs", "scene",
    "Material", "MaterialAdapter", "compose_material", "pretrain_base",
    "Trajectory", "simulate", "step",
    "ParticleSet", "SceneConfig", "make_benchmark",
    "MatgroundError", "DomainError", "OutOfDomainError", "CatalogError", "InversionError",
    "CompositionError", "GeometryError", "TrainingError", "DifferentiationError",
    "FormatError",
]
