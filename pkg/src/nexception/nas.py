"""Configuration search over the block-design space.

Two strategies: uniform random sampling and a sequential model-based loop
(random initialization, then an expected-improvement pick over candidates
scored by a bootstrapped regression forest on the categorical space).
Local parameter importance is the per-dimension share of surrogate
prediction variance around the incumbent, which makes it invariant to
affine changes of the objective.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import ndtr

from .data import Dataset
from .errors import ConfigError, DivergenceError
from .models import DOMAINS, ArchConfig, build_variant, space_cardinality
from .training import TrainConfig, train_model

FIELD_NAMES = tuple(DOMAINS)


def sample_config(rng: np.random.Generator) -> ArchConfig:
    """One uniform draw per dimension."""
    return ArchConfig(**{f: ch[int(rng.integers(len(ch)))]
                         for f, ch in DOMAINS.items()})


def enumerate_space():
    """Yield every configuration once; the count equals space_cardinality()."""
    keys = list(DOMAINS)
    for combo in itertools.product(*(DOMAINS[k] for k in keys)):
        yield ArchConfig(**dict(zip(keys, combo)))


def config_distance(a: ArchConfig, b: ArchConfig) -> int:
    """Hamming distance over the eleven categorical dimensions."""
    return sum(getattr(a, f) != getattr(b, f) for f in FIELD_NAMES)


@dataclass
class TrialRecord:
    index: int
    config: dict
    objective: float
    diverged: bool = False
    seconds: float = 0.0
    incumbent_objective: float = float("-inf")

    def to_json(self) -> str:
        return json.dumps({f.name: getattr(self, f.name) for f in fields(self)})


# -- surrogate ------------------------------------------------------------------


_DOMAIN_SIZES = tuple(len(DOMAINS[f]) for f in FIELD_NAMES)


def config_codes(cfg: ArchConfig) -> np.ndarray:
    """Per-dimension choice indices, the integer form used by the surrogate."""
    return np.array([DOMAINS[f].index(getattr(cfg, f)) for f in FIELD_NAMES],
                    dtype=np.int64)


def codes_to_config(codes: np.ndarray) -> ArchConfig:
    return ArchConfig(**{f: DOMAINS[f][int(c)]
                         for f, c in zip(FIELD_NAMES, codes)})


class _TreeNode:
    __slots__ = ("dim", "choice", "left", "right", "value")

    def __init__(self, value=None, dim=None, choice=None, left=None, right=None):
        self.value = value
        self.dim = dim
        self.choice = choice
        self.left = left
        self.right = right


def _fit_tree(codes: np.ndarray, y: np.ndarray, rng: np.random.Generator,
              min_leaf: int = 2, mtry: int = len(FIELD_NAMES)) -> _TreeNode:
    """Greedy binary regression tree on categorical codes.

    Splits test one choice against the rest of its domain and minimize the
    summed squared error of the two children. Dimensions are scanned in a
    per-node random order (optionally a strict subset), so equal-score
    splits break differently across the forest.
    """
    if len(y) < 2 * min_leaf or float(y.var()) < 1e-14:
        return _TreeNode(value=float(y.mean()))
    dims = rng.permutation(len(FIELD_NAMES))[:mtry]
    best = None
    for d in dims:
        col = codes[:, d]
        for choice in np.unique(col):
            mask = col == choice
            nl, nr = int(mask.sum()), int((~mask).sum())
            if nl < min_leaf or nr < min_leaf:
                continue
            sse = nl * float(y[mask].var()) + nr * float(y[~mask].var())
            if best is None or sse < best[0]:
                best = (sse, int(d), int(choice), mask)
    if best is None:
        return _TreeNode(value=float(y.mean()))
    _, d, choice, mask = best
    return _TreeNode(dim=d, choice=choice,
                     left=_fit_tree(codes[mask], y[mask], rng, min_leaf, mtry),
                     right=_fit_tree(codes[~mask], y[~mask], rng, min_leaf, mtry))


def _tree_predict(node: _TreeNode, codes: np.ndarray, out: np.ndarray,
                  idx: np.ndarray) -> None:
    if node.value is not None:
        out[idx] = node.value
        return
    mask = codes[idx, node.dim] == node.choice
    if mask.any():
        _tree_predict(node.left, codes, out, idx[mask])
    if not mask.all():
        _tree_predict(node.right, codes, out, idx[~mask])


class _Surrogate:
    """Bootstrapped regression forest over the categorical space.

    mu is the mean of per-tree predictions; sigma is their spread plus an
    exploration bonus growing with the Hamming distance to the nearest
    observation, so unexplored regions keep nonzero expected improvement.
    Greedy split selection gives inert dimensions near-zero influence on
    the predictions, which is what makes the importance analysis sharp.
    """

    def __init__(self, configs: list[ArchConfig], values: list[float],
                 n_trees: int = 24, min_leaf: int = 2, explore: float = 0.01,
                 seed: int = 0):
        if not configs:
            raise ConfigError("surrogate needs at least one observation")
        self.codes = np.stack([config_codes(c) for c in configs])
        self.values = np.asarray(values, dtype=np.float64)
        self.explore = explore
        n = len(configs)
        rng = np.random.default_rng([int(seed), 0x7E5, n])
        self.trees = []
        for _ in range(n_trees):
            idx = rng.integers(n, size=n) if n > 1 else np.zeros(1, dtype=int)
            self.trees.append(_fit_tree(self.codes[idx], self.values[idx], rng,
                                        min_leaf=min_leaf))

    def predict_batch(self, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        codes = np.atleast_2d(codes)
        m = codes.shape[0]
        preds = np.empty((len(self.trees), m))
        all_idx = np.arange(m)
        for b, tree in enumerate(self.trees):
            _tree_predict(tree, codes, preds[b], all_idx)
        mu = preds.mean(axis=0)
        dmin = (codes[:, None, :] != self.codes[None, :, :]).sum(axis=2).min(axis=1)
        sigma = preds.std(axis=0) + self.explore * dmin
        return mu, sigma

    def predict(self, cfg: ArchConfig) -> tuple[float, float]:
        mu, sigma = self.predict_batch(config_codes(cfg)[None, :])
        return float(mu[0]), float(sigma[0])

    def mean(self, cfg: ArchConfig) -> float:
        return self.predict(cfg)[0]


def expected_improvement(mu, sigma, best):
    """EI for a maximization problem; sigma == 0 degrades to the plain
    improvement. Accepts scalars or arrays."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    gap = mu - best
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(sigma > 0, gap / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = np.where(sigma > 0,
                      gap * ndtr(u) + sigma * np.exp(-0.5 * u * u)
                      / math.sqrt(2.0 * math.pi),
                      np.maximum(gap, 0.0))
    return float(ei) if ei.ndim == 0 else ei


# -- objectives -----------------------------------------------------------------


def planted_objective(cfg: ArchConfig) -> float:
    """Deterministic benchmark surface with one dominant factor.

    0.50 base, +0.30 for the inverted bottleneck, +0.05 for a 5x5 middle
    kernel; the other nine dimensions are inert. Maximum 0.85.
    """
    score = 0.50
    if cfg.bottleneck == "inverted3":
        score += 0.30
    if cfg.kernel_middle == 5:
        score += 0.05
    return score


def evaluate_config(cfg: ArchConfig, train_ds: Dataset, val_ds: Dataset,
                    train_cfg: TrainConfig, *, seed: int = 0) -> tuple[float, bool]:
    """Train the search-scale network under ``cfg`` and report validation
    top-1. A divergent run scores 0 with the flag set instead of raising."""
    model = build_variant("reduced_nas", num_classes=train_ds.num_classes,
                          config=cfg, drop_prob=train_cfg.drop_prob, seed=seed)
    try:
        out = train_model(model, train_ds, val_ds, train_cfg)
    except DivergenceError:
        return 0.0, True
    return float(out["best_val_top1"]), False


# -- the loop -------------------------------------------------------------------

STRATEGIES = ("random", "smbo")


def search(objective, *, strategy: str = "smbo", max_trials: int = 64,
           wall_budget_s: float | None = None, seed: int = 0,
           init_random: int = 16, candidates: int = 500,
           history_path: str | None = None) -> dict:
    """Maximize ``objective`` over the configuration space.

    ``objective(cfg)`` returns a float or a (float, diverged) pair. Stops at
    ``max_trials`` evaluations or when the wall budget is exhausted,
    whichever comes first (at least one trial always runs). Each trial is
    appended to ``history_path`` as one JSON line when given.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got "
                          f"'{strategy}'")
    if max_trials < 1:
        raise ConfigError(f"max_trials must be >= 1, got {max_trials}")
    rng = np.random.default_rng([int(seed), 0x5EA])
    t0 = time.monotonic()
    trials: list[TrialRecord] = []
    seen: set[tuple] = set()
    best_cfg: ArchConfig | None = None
    best_val = float("-inf")
    sink = open(history_path, "w") if history_path else None
    try:
        for index in range(max_trials):
            if index > 0 and wall_budget_s is not None \
                    and time.monotonic() - t0 >= wall_budget_s:
                break
            if strategy == "random" or index < init_random or not trials:
                cfg = _fresh_sample(rng, seen)
            else:
                cfg = _propose(rng, trials, best_val, candidates, seen)
            tick = time.monotonic()
            out = objective(cfg)
            val, diverged = out if isinstance(out, tuple) else (out, False)
            val = float(val)
            if val > best_val:
                best_val, best_cfg = val, cfg
            rec = TrialRecord(index=index, config=cfg.to_dict(), objective=val,
                              diverged=bool(diverged),
                              seconds=time.monotonic() - tick,
                              incumbent_objective=best_val)
            trials.append(rec)
            seen.add(tuple(cfg.to_dict().values()))
            if sink:
                sink.write(rec.to_json() + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return {
        "strategy": strategy,
        "trials": trials,
        "incumbent": best_cfg.to_dict() if best_cfg else None,
        "incumbent_objective": best_val,
        "evaluations": len(trials),
        "wall_seconds": time.monotonic() - t0,
        "space_size": space_cardinality(),
    }


def _fresh_sample(rng, seen, tries: int = 64) -> ArchConfig:
    cfg = sample_config(rng)
    for _ in range(tries):
        if tuple(cfg.to_dict().values()) not in seen:
            break
        cfg = sample_config(rng)
    return cfg


def _sample_codes(rng, n: int) -> np.ndarray:
    cols = [rng.integers(size, size=n) for size in _DOMAIN_SIZES]
    return np.stack(cols, axis=1)


def _propose(rng, trials: list[TrialRecord], best_val: float,
             candidates: int, seen) -> ArchConfig:
    model = _Surrogate([ArchConfig.from_dict(t.config) for t in trials],
                       [t.objective for t in trials])
    codes = _sample_codes(rng, candidates)
    fresh = np.array([tuple(codes_to_config(c).to_dict().values()) not in seen
                      for c in codes])
    if not fresh.any():
        return _fresh_sample(rng, seen)
    codes = codes[fresh]
    mu, sigma = model.predict_batch(codes)
    ei = expected_improvement(mu, sigma, best_val)
    return codes_to_config(codes[int(np.argmax(ei))])


# -- importance -----------------------------------------------------------------


def lpi_importance(trials: list[TrialRecord],
                   incumbent: ArchConfig | None = None) -> dict[str, float]:
    """Share of local prediction variance per dimension.

    Around the incumbent, each dimension is swept over its choices while
    the others stay fixed; the population variance of the surrogate means,
    normalized to sum to one, is that dimension's importance. Affine
    rescaling of the objective cancels in the ratio. All-zero variance
    (a flat surface) reports zeros.
    """
    if len(trials) < 2:
        raise ConfigError("importance needs at least two trials, got "
                          f"{len(trials)}")
    model = _Surrogate([ArchConfig.from_dict(t.config) for t in trials],
                       [t.objective for t in trials])
    if incumbent is None:
        incumbent = ArchConfig.from_dict(
            max(trials, key=lambda t: t.objective).config)
    variances = {}
    for f, choices in DOMAINS.items():
        preds = []
        for choice in choices:
            swept = ArchConfig.from_dict({**incumbent.to_dict(), f: choice})
            preds.append(model.mean(swept))
        preds = np.asarray(preds)
        variances[f] = float(np.mean((preds - preds.mean()) ** 2))
    total = sum(variances.values())
    if total == 0.0:
        return {f: 0.0 for f in variances}
    return {f: v / total for f, v in variances.items()}
