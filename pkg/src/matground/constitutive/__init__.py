"""Elastic laws, return mappings, neural variants and low-rank residuals."""

from .elastic import FixedCorotated, NeoHookean, NeuralElastic, StVK
from .material import (ELASTIC_SIZES, PLASTIC_SIZES, Material, MaterialAdapter,
                       PretrainReport, compose_material, load_material,
                       load_material_adapter, material_from_dict, material_to_dict,
                       pretrain_base, random_deformations, random_rotations,
                       save_material, save_material_adapter)
from .mlp import LowRankAdapter, Mlp, load_adapter, load_mlp, save_adapter, save_mlp
from .plastic import DruckerPrager, Identity, NeuralPlastic, VonMises


def elastic_stress(model, F):
    """Kirchhoff stress of ``model`` (elastic law or Material) for a batch of F."""
    return model.stress(F)


def plastic_project(model, F):
    """Return mapping of ``model`` (plastic law or Material) for a batch of F."""
    return model.project(F)
