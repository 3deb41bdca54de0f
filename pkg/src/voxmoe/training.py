"""Training-side utilities: losses, subset division, balanced sampling,
adaptive learning rate, the two-sample KS statistic, and the hierarchical
supervision plan.

No optimizer or autodiff lives here; the supervision plan is a declarative
routing descriptor and the losses ship with closed-form gradients checked by
finite differences.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Hashable, Iterable, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import RegistryError, ShapeError

PROB_CLAMP = 1e-12


def cross_entropy(probs: Sequence[float], label: int) -> float:
    """-log(probs[label]) with probabilities clamped to >= 1e-12."""
    probs = np.asarray(probs, dtype=np.float64).ravel()
    if np.any(probs < 0) or abs(float(probs.sum()) - 1.0) > 1e-9:
        raise ValueError("probs must be a simplex vector")
    label = int(label)
    if not 0 <= label < probs.shape[0]:
        raise IndexError(f"label {label} out of range for {probs.shape[0]} classes")
    return float(-math.log(max(float(probs[label]), PROB_CLAMP)))


def smooth_l1(pred, target, beta: float = 1.0) -> float:
    """Summed smooth-L1: 0.5 x^2 / beta inside |x| < beta, |x| - beta/2 outside."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ShapeError(f"length mismatch: {pred.shape} vs {target.shape}")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    x = np.abs(pred - target)
    per = np.where(x < beta, 0.5 * x * x / beta, x - 0.5 * beta)
    return float(per.sum())


def smooth_l1_grad(pred, target, beta: float = 1.0) -> np.ndarray:
    """Gradient of :func:`smooth_l1` w.r.t. ``pred`` (continuous at |x| = beta)."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ShapeError(f"length mismatch: {pred.shape} vs {target.shape}")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    x = pred - target
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def route_loss(cls_terms: Union[float, Iterable[float]],
               reg_terms: Union[float, Iterable[float]] = ()) -> float:
    """Per-route loss: sum of the classification and regression terms."""
    def total(terms):
        arr = np.atleast_1d(np.asarray(terms, dtype=np.float64))
        return float(arr.sum())
    return total(cls_terms) + total(reg_terms)


@dataclasses.dataclass(frozen=True)
class SubsetAssignment:
    """Per-expert target/auxiliary scene ids.

    Targets partition the scenes by label; each auxiliary set is drawn from
    the union of the other targets and size-matched to its target set.
    Labels listed in ``with_replacement`` had an auxiliary pool smaller than
    the target (sampled with replacement, or empty when the pool was empty).
    """

    targets: Mapping[Hashable, tuple]
    auxiliaries: Mapping[Hashable, tuple]
    sizes: Mapping[Hashable, int]
    with_replacement: frozenset


def divide_subsets(scenes: Sequence[tuple], seed: int = 0) -> SubsetAssignment:
    """Partition labeled scenes into per-expert target + auxiliary subsets.

    ``scenes`` is a sequence of (scene_id, label) pairs; each label forms one
    target set, and its auxiliary set is sampled uniformly without
    replacement from the other labels' scenes, sized to match.  Short pools
    fall back to replacement sampling and are flagged.
    """
    rng = np.random.default_rng(seed)
    targets: dict = {}
    for scene_id, label in scenes:
        targets.setdefault(label, []).append(scene_id)

    auxiliaries = {}
    flagged = set()
    for label, ids in targets.items():
        pool = [sid for other, sids in targets.items() if other != label for sid in sids]
        want = len(ids)
        if not pool:
            auxiliaries[label] = ()
            flagged.add(label)
            continue
        replace = want > len(pool)
        if replace:
            flagged.add(label)
        picked = rng.choice(len(pool), size=want, replace=replace)
        auxiliaries[label] = tuple(pool[i] for i in picked)

    return SubsetAssignment(
        targets={k: tuple(v) for k, v in targets.items()},
        auxiliaries=auxiliaries,
        sizes={k: len(v) for k, v in targets.items()},
        with_replacement=frozenset(flagged),
    )


def balanced_probs(sizes: Sequence[int]) -> np.ndarray:
    """Selection probabilities equalizing p_i * n_i across subsets (p_i ~ 1/n_i)."""
    sizes = np.asarray(sizes, dtype=np.float64).ravel()
    if sizes.size == 0 or np.any(sizes < 1):
        raise ValueError(f"subset sizes must all be >= 1, got {sizes}")
    inv = 1.0 / sizes
    return inv / inv.sum()


@dataclasses.dataclass(frozen=True)
class AdaptiveLrInput:
    base_rate: float
    batch_flags: Sequence[bool]  # True where the sample is a target sample

    def __post_init__(self):
        if not self.base_rate > 0:
            raise ValueError(f"base rate must be positive, got {self.base_rate}")
        if len(self.batch_flags) == 0:
            raise ValueError("batch must be non-empty")


def adaptive_lr(inp: AdaptiveLrInput) -> float:
    """base_rate * (1 + p) where p is the batch's target-sample fraction."""
    flags = np.asarray(inp.batch_flags, dtype=np.float64)
    return float(inp.base_rate * (1.0 + flags.mean()))


class KsResult(NamedTuple):
    statistic: float
    pvalue: float


def _kolmogorov_sf(lam: float, terms: int = 100) -> float:
    # Asymptotic Kolmogorov survival series; degenerates numerically for tiny
    # lambda where the true value is 1 to double precision.
    if lam < 0.05:
        return 1.0
    j = np.arange(1, terms + 1, dtype=np.float64)
    series = 2.0 * np.sum((-1.0) ** (j - 1) * np.exp(-2.0 * j * j * lam * lam))
    return float(min(1.0, max(0.0, series)))


def ks_two_sample(a, b) -> KsResult:
    """Two-sample KS statistic and its asymptotic p-value.

    D is the sup over pooled sample points of |F_a - F_b| for the
    right-continuous empirical CDFs; the p-value uses the Kolmogorov series
    at sqrt(n*m/(n+m)) * D.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / n
    fb = np.searchsorted(b, pooled, side="right") / m
    d = float(np.abs(fa - fb).max())
    lam = math.sqrt(n * m / (n + m)) * d
    return KsResult(d, _kolmogorov_sf(lam))


GROUP_AMDB_LIDAR = "amdb.lidar"
GROUP_AMDB_IMAGE = "amdb.image"
GROUP_EXPERTS = ("expert.lpe", "expert.vee", "expert.ape")
REQUIRED_GROUPS = (GROUP_AMDB_LIDAR, GROUP_AMDB_IMAGE) + GROUP_EXPERTS

LOSSES = ("cross_entropy", "smooth_l1")


@dataclasses.dataclass(frozen=True)
class SupervisionRoute:
    name: str
    source: str                      # which output this route supervises
    losses: tuple[str, str]          # classification + regression terms
    groups: tuple[str, ...] = ()
    per_expert_groups: Optional[Mapping[str, tuple[str, ...]]] = None


@dataclasses.dataclass(frozen=True)
class SupervisionPlan:
    routes: tuple[SupervisionRoute, ...]

    def __post_init__(self):
        if len(self.routes) != 3:
            raise ValueError(f"supervision plan must hold exactly 3 routes, "
                             f"got {len(self.routes)}")


def build_supervision_plan(registry: Mapping[str, object],
                           joint_phase: bool = False) -> SupervisionPlan:
    """Three supervision routes over the registered parameter groups.

    Route 1 supervises the LiDAR-branch outputs, route 2 the image-branch
    outputs, route 3 the expert outputs.  In the joint phase only the
    fully-multimodal expert's branch keeps preprocessing-bound gradients;
    otherwise every expert branch also lists its upstream groups.
    """
    for group in REQUIRED_GROUPS:
        if group not in registry:
            raise RegistryError(group)

    def upstream(expert_group: str) -> tuple[str, ...]:
        if expert_group == "expert.ape":
            return (GROUP_AMDB_LIDAR, GROUP_AMDB_IMAGE)
        if joint_phase:
            return ()
        return (GROUP_AMDB_LIDAR,)

    per_expert = {g: (g,) + upstream(g) for g in GROUP_EXPERTS}
    routes = (
        SupervisionRoute("lidar-branch", "amdb.lidar_output", LOSSES,
                         groups=(GROUP_AMDB_LIDAR,)),
        SupervisionRoute("image-branch", "amdb.image_output", LOSSES,
                         groups=(GROUP_AMDB_IMAGE,)),
        SupervisionRoute("experts", "expert_output", LOSSES,
                         per_expert_groups=per_expert),
    )
    return SupervisionPlan(routes)
