"""Two-finger force closure (Nguyen's friction-cone test), the friction sweep
score and the positive/negative labeling rule."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .geom_core import InputError

MU_LIST = (3.0, 2.0, 1.7, 1.4, 1.3, 1.2, 1.1, 1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3)
TH_GOOD = 0.45
TH_BAD = 0.75
UNSTABLE = math.inf  # score of a grasp that fails even at the largest friction


class GraspLabel(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    DISCARDED = -1


@dataclass(frozen=True)
class ContactPair:
    """Two contacts with outward unit surface normals."""

    p1: np.ndarray
    p2: np.ndarray
    n1: np.ndarray
    n2: np.ndarray

    def __post_init__(self):
        for name in ("p1", "p2", "n1", "n2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        if np.linalg.norm(self.p2 - self.p1) <= 1e-6:
            raise InputError("contact points coincide")

    @property
    def width(self) -> float:
        return float(np.linalg.norm(self.p2 - self.p1))

    def swapped(self) -> "ContactPair":
        return ContactPair(self.p2, self.p1, self.n2, self.n1)


def contact_angles(p1, p2, n1, n2):
    """Angles between each contact normal and the contact line (vectorized).

    Returns ``(alpha1, alpha2)`` in radians; NaN where a normal is invalid.
    """
    p1, p2, n1, n2 = (np.asarray(a, dtype=np.float64) for a in (p1, p2, n1, n2))
    d = p2 - p1
    v = d / np.linalg.norm(d, axis=-1, keepdims=True)
    c1 = np.clip(np.sum(n1 * -v, axis=-1), -1.0, 1.0)
    c2 = np.clip(np.sum(n2 * v, axis=-1), -1.0, 1.0)
    return np.arccos(c1), np.arccos(c2)


def force_closure_batch(p1, p2, n1, n2, mu) -> np.ndarray:
    """Vectorized force-closure test; ``mu`` broadcasts against the contacts."""
    a1, a2 = contact_angles(p1, p2, n1, n2)
    beta = np.arctan(np.asarray(mu, dtype=np.float64))
    # NaN angles compare False, so invalid normals never pass
    return (a1 < beta) & (a2 < beta)


def force_closure_test(c: ContactPair, mu: float) -> bool:
    """True iff the contact line lies strictly inside both friction cones."""
    if mu <= 0:
        raise InputError("friction coefficient must be positive")
    return bool(force_closure_batch(c.p1, c.p2, c.n1, c.n2, mu))


def _check_mu_list(list_mu):
    mus = np.asarray(list_mu, dtype=np.float64)
    if mus.size == 0:
        raise InputError("friction list is empty")
    if np.any(mus <= 0) or np.any(np.diff(mus) >= 0):
        raise InputError("friction list must be strictly descending and positive")
    return mus


def sweep_scores(p1, p2, n1, n2, list_mu=MU_LIST) -> np.ndarray:
    """Smallest friction in ``list_mu`` still giving force closure, per contact
    pair; ``UNSTABLE`` (inf) where the largest value already fails."""
    mus = _check_mu_list(list_mu)
    a1, a2 = contact_angles(p1, p2, n1, n2)
    worst = np.fmax(a1, a2)
    worst = np.where(np.isnan(a1) | np.isnan(a2), np.inf, worst)
    passes = worst[..., None] < np.arctan(mus)
    # beta grows with mu, so the passing entries form a prefix of list_mu
    n_pass = passes.sum(axis=-1)
    return np.where(n_pass > 0, mus[np.maximum(n_pass - 1, 0)], UNSTABLE)


def friction_sweep_score(c: ContactPair, list_mu=MU_LIST) -> float:
    """Lower the friction from the top of ``list_mu`` until closure is lost."""
    mus = _check_mu_list(list_mu)
    if not (np.all(np.isfinite(c.n1)) and np.all(np.isfinite(c.n2))):
        return UNSTABLE
    score = UNSTABLE
    for mu in mus:
        if not force_closure_test(c, float(mu)):
            break
        score = float(mu)
    return score


def label(score: float, th_good: float = TH_GOOD, th_bad: float = TH_BAD) -> GraspLabel:
    if not th_good < th_bad:
        raise InputError("th_good must be below th_bad")
    if math.isfinite(score) and score <= th_good:
        return GraspLabel.POSITIVE
    if score >= th_bad:
        return GraspLabel.NEGATIVE
    return GraspLabel.DISCARDED
