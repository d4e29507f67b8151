"""Stochastic particle simulation of collisional kinetic plasmas.

Particles follow Stratonovich SDEs whose drift and diffusion realize a
Fokker-Planck collision operator; fields are external or computed from the
ensemble by softened pairwise Coulomb sums.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .collision import (Coulomb, ConstantFrequency, CustomDK, ForcingEval, LenardBernstein,
                        LocalitySpec, Lorentz, NoCollisions, PowerLawFrequency, decompose_dk)
from .ensemble import (DepositionGrid, InitialDistribution, ParticleEnsemble, SpeciesParams,
                       deposit_charge_current, deposit_density, init_ensemble, moments)
from .fields import (AnalyticExternal, ExternalField, SelfConsistentCoulomb, Vacuum, efield_at,
                     potential_at, self_field_batch)
from .rng import WienerBatch, refine_increments, wiener_increments
from .sde import IntegratorSpec, NumericalError, RunResult, run, simulate

__all__ = [
    "__version__", "AnalyticExternal", "ConstantFrequency", "Coulomb", "CustomDK",
    "DepositionGrid", "ExternalField", "ForcingEval", "InitialDistribution", "IntegratorSpec",
    "LenardBernstein", "LocalitySpec", "Lorentz", "NoCollisions", "NumericalError",
    "ParticleEnsemble", "PowerLawFrequency", "RunResult", "SelfConsistentCoulomb",
    "SpeciesParams", "Vacuum", "WienerBatch", "decompose_dk", "deposit_charge_current",
    "deposit_density", "efield_at", "init_ensemble", "moments", "potential_at",
    "refine_increments", "run", "self_field_batch", "simulate", "wiener_increments",
]
