"""
Named family and covariance profiles
"""
from dataclasses import dataclass
from typing import Dict, Tuple


@dataclass(frozen=True)
class FamilyProfile:
    """
    Family profile containing family-specific metadata.

    Attributes:
        link: Name of the canonical link
        requires_trials: Whether a trials vector m must accompany the response
        aliases: Alternative names accepted in configuration files
    """
    link: str
    requires_trials: bool
    aliases: Tuple[str, ...] = ()


@dataclass(frozen=True)
class CovarianceProfile:
    """
    Covariance profile containing kind-specific hyperparameter metadata.

    Attributes:
        parameter_names: Names of ω components, in order
        default_omega: Starting hyperparameters when a configuration gives none
        default_fixed: Default fixed mask (True = held constant)
        start_grid: Per-component candidate values for the default multi-start grid;
                    fixed components take their current value instead
        requires_distances: Whether the kind is spatial (needs a distance matrix)
    """
    parameter_names: Tuple[str, ...]
    default_omega: Tuple[float, ...]
    default_fixed: Tuple[bool, ...]
    start_grid: Tuple[Tuple[float, ...], ...]
    requires_distances: bool


FAMILIES: Dict[str, FamilyProfile] = {
    "binomial": FamilyProfile(link="logit", requires_trials=True, aliases=("binomial-logit",)),
    "poisson": FamilyProfile(link="log", requires_trials=False, aliases=("poisson-log",)),
}


# ω₃ (smoothness) is held at 0.5 unless explicitly freed, which makes the default
# Matérn identical to the exponential kernel.
COVARIANCES: Dict[str, CovarianceProfile] = {
    "matern": CovarianceProfile(
        parameter_names=("omega1", "omega2", "omega3"),
        default_omega=(0.5, 1.0, 0.5),
        default_fixed=(False, False, True),
        start_grid=((0.25, 0.5, 0.75), (0.5, 1.0, 2.0), (0.5,)),
        requires_distances=True,
    ),
    "exponential": CovarianceProfile(
        parameter_names=("omega1", "omega2"),
        default_omega=(0.5, 1.0),
        default_fixed=(False, False),
        start_grid=((0.25, 0.5, 0.75), (0.5, 1.0, 2.0)),
        requires_distances=True,
    ),
    "scaled-identity": CovarianceProfile(
        parameter_names=("omega1",),
        default_omega=(1.0,),
        default_fixed=(False,),
        start_grid=((0.1, 0.5, 1.0, 2.0),),
        requires_distances=False,
    ),
}


def resolve_family_name(name: str) -> str:
    """Map a family name or alias to its canonical registry key, raise ValueError if unknown"""
    key = name.strip().lower()
    for canonical, profile in FAMILIES.items():
        if key == canonical or key in profile.aliases:
            return canonical
    supported = ", ".join(
        [n for n in FAMILIES] + [a for p in FAMILIES.values() for a in p.aliases]
    )
    raise ValueError(f"Unsupported family '{name}'. Supported families: {supported}")


def get_covariance_profile(kind: str) -> CovarianceProfile:
    """Get covariance profile by kind name, raise ValueError if not found"""
    if kind not in COVARIANCES:
        supported = ", ".join(COVARIANCES.keys())
        raise ValueError(
            f"Unsupported covariance kind '{kind}'. Supported kinds: {supported}"
        )
    return COVARIANCES[kind]
