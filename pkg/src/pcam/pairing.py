"""Source/target pair construction, pseudo-labels, and pair filtering.

Distances are Euclidean on L2-normalized features so the similarity
threshold is scale-free.  Pseudo-labels come from probability-weighted
class centers refined by a single hard k-means round; pairs survive only
when the target pseudo-label agrees with the source label and the pair
similarity 1/(1+d) clears the threshold.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from .numerics import ContractViolation, check_finite, format_float

calls: Counter = Counter()


@dataclass
class FeatureBank:
    features: np.ndarray            # (n, D)
    domain: str
    labels: np.ndarray | None = None       # true (source) or pseudo (target)
    probs: np.ndarray | None = None        # (n, K) classifier distributions

    def __post_init__(self):
        self.features = check_finite("features", self.features)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ContractViolation("feature bank must be a non-empty (n, D) array")
        if self.probs is not None:
            self.probs = check_finite("probs", self.probs)
            sums = self.probs.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-9):
                raise ContractViolation("classifier distributions must sum to 1")

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class TrainingPair:
    src: int
    tgt: int
    dist: float
    agree: bool = False
    sim_ok: bool = False

    @property
    def kept(self) -> bool:
        return self.agree and self.sim_ok

    @property
    def similarity(self) -> float:
        return 1.0 / (1.0 + self.dist)


def l2_normalize(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    return features / np.maximum(norms, 1e-12)


def _distance_table(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (n_a, n_b) Euclidean distances, computed stably via explicit differences
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))


def build_pairs(source: FeatureBank, target: FeatureBank) -> list[TrainingPair]:
    """Nearest-source pair for every target plus the reverse direction,
    deduplicated; argmin ties break to the lowest index."""
    calls["build_pairs"] += 1
    fs = l2_normalize(source.features)
    ft = l2_normalize(target.features)
    table = _distance_table(fs, ft)      # (n_s, n_t)
    seen: set[tuple[int, int]] = set()
    pairs: list[TrainingPair] = []
    for j in range(table.shape[1]):
        i = int(np.argmin(table[:, j]))
        seen.add((i, j))
        pairs.append(TrainingPair(src=i, tgt=j, dist=float(table[i, j])))
    for i in range(table.shape[0]):
        j = int(np.argmin(table[i, :]))
        if (i, j) not in seen:
            seen.add((i, j))
            pairs.append(TrainingPair(src=i, tgt=j, dist=float(table[i, j])))
    return pairs


def init_centers(target: FeatureBank, n_classes: int):
    """Probability-weighted class centers, nearest-center labels, then one
    hard update round.

    Returns (centers, pseudo_labels, active): classes with zero probability
    mass get no center and are never assigned.
    """
    calls["init_centers"] += 1
    if target.probs is None:
        raise ContractViolation("init_centers needs classifier distributions")
    if target.probs.shape[1] != n_classes:
        raise ContractViolation("distribution width must equal the class count")
    ft = l2_normalize(target.features)
    centers = np.zeros((n_classes, ft.shape[1]))
    active = np.zeros(n_classes, dtype=bool)
    for k in range(n_classes):
        w = target.probs[:, k]
        mass = float(w.sum())
        if mass > 0.0:
            centers[k] = (w[:, None] * ft).sum(axis=0) / mass
            active[k] = True
    labels = _assign(ft, centers, active)
    # one refinement round: hard means from the assignment, then relabel
    for k in range(n_classes):
        if not active[k]:
            continue
        members = ft[labels == k]
        if len(members):
            centers[k] = members.mean(axis=0)
    labels = _assign(ft, centers, active)
    return centers, labels, active


def _assign(features: np.ndarray, centers: np.ndarray, active: np.ndarray) -> np.ndarray:
    if not active.any():
        raise ContractViolation("no class has probability mass")
    dists = _distance_table(features, centers)
    dists[:, ~active] = np.inf
    return np.argmin(dists, axis=1).astype(int)


def filter_pairs(pairs: list[TrainingPair], pseudo_labels: np.ndarray,
                 source_labels: np.ndarray, sim_threshold: float,
                 require_similarity: bool = True) -> list[TrainingPair]:
    """Set the agreement/similarity flags; kept = agree and sim_ok.

    require_similarity=False disables the similarity screen (flag passes
    unconditionally), which is the label-agreement-only baseline.
    """
    calls["filter_pairs"] += 1
    if not 0.0 <= sim_threshold <= 1.0:
        raise ContractViolation("similarity threshold must lie in [0, 1]")
    out = []
    for p in pairs:
        agree = int(pseudo_labels[p.tgt]) == int(source_labels[p.src])
        sim_ok = (not require_similarity) or p.similarity >= sim_threshold
        out.append(replace(p, agree=agree, sim_ok=sim_ok))
    return out


def kept_pairs(pairs: list[TrainingPair]) -> list[TrainingPair]:
    return [p for p in pairs if p.kept]


def inject_label_noise(labels: np.ndarray, gamma: float, rng: np.random.Generator,
                       n_classes: int) -> np.ndarray:
    """Replace exactly round((1 - gamma) * n) labels with a different class."""
    if not 0.0 <= gamma <= 1.0:
        raise ContractViolation("retained-accuracy fraction must lie in [0, 1]")
    labels = np.asarray(labels, dtype=int).copy()
    n = len(labels)
    n_flip = int(np.floor((1.0 - gamma) * n + 0.5))
    if n_flip == 0:
        return labels
    if n_classes < 2:
        raise ContractViolation("cannot alter labels with fewer than two classes")
    idx = rng.choice(n, size=n_flip, replace=False)
    for i in idx:
        offset = int(rng.integers(1, n_classes))
        labels[i] = (labels[i] + offset) % n_classes
    return labels


def pair_purity(pairs: list[TrainingPair], true_target_labels: np.ndarray,
                source_labels: np.ndarray) -> float:
    """Fraction of pairs whose true target label matches the source label."""
    if not pairs:
        return float("nan")
    hits = sum(int(true_target_labels[p.tgt]) == int(source_labels[p.src]) for p in pairs)
    return hits / len(pairs)


def dump_pairs(path, pairs: list[TrainingPair]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for p in pairs:
            fh.write(f"{p.src} {p.tgt} {format_float(p.dist)} "
                     f"{int(p.agree)} {format_float(p.similarity)} {int(p.kept)}\n")
