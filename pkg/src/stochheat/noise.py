"""Brownian randomness: sampled increment ensembles and an exact Bernoulli tree.

Sampled mode draws Gaussian increments with a counter-based generator keyed by
(seed, path), so any single path is recomputable without materializing the
ensemble.  Tree mode replaces the Brownian filtration by the full binary tree
of +-sqrt(dt) increments with uniform leaf weights: the first two moments
match and every expectation becomes an exact finite sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ResourceError, ShapeError

__all__ = [
    "TimeMesh",
    "PathEnsemble",
    "BernoulliTree",
    "sample_ensemble",
    "path_increments",
    "build_tree",
    "conditional_expectation",
]

DEFAULT_TREE_CAP = 16


@dataclass(frozen=True)
class TimeMesh:
    """Uniform partition of [0, T] into `steps` intervals."""

    horizon: float
    steps: int

    def __post_init__(self):
        if self.horizon <= 0.0:
            raise ConfigurationError("time horizon must be positive")
        if self.steps < 1:
            raise ConfigurationError("need at least one time step")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


def path_increments(seed: int, omega: int, mesh: TimeMesh) -> np.ndarray:
    """Increments of path `omega`, reproducible independently of the ensemble."""
    rng = np.random.Generator(np.random.Philox(key=[int(seed), int(omega)]))
    return np.sqrt(mesh.dt) * rng.standard_normal(mesh.steps)


@dataclass(frozen=True)
class PathEnsemble:
    """Monte Carlo increment ensemble; increments has shape (n_paths, steps)."""

    mesh: TimeMesh
    seed: int
    increments: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_paths, 1.0 / self.n_paths)


def sample_ensemble(mesh: TimeMesh, n_paths: int, seed: int) -> PathEnsemble:
    """Draw `n_paths` Gaussian N(0, dt) increment paths."""
    if n_paths < 1:
        raise ConfigurationError("need at least one path")
    inc = np.stack([path_increments(seed, omega, mesh) for omega in range(n_paths)])
    inc.flags.writeable = False
    return PathEnsemble(mesh=mesh, seed=seed, increments=inc)


@dataclass(frozen=True)
class BernoulliTree:
    """Full binary tree of +-sqrt(dt) increments, uniform leaf weights.

    Leaf `l` takes at step k the sign of bit (depth-1-k) of l, so leaves
    sharing a history prefix are contiguous; the history node at level k of
    leaf l is l >> (depth - k).
    """

    mesh: TimeMesh

    @property
    def depth(self) -> int:
        return self.mesh.steps

    @property
    def n_leaves(self) -> int:
        return 2**self.depth

    @property
    def leaf_probability(self) -> float:
        return 2.0 ** (-self.depth)

    def step_signs(self, k: int) -> np.ndarray:
        """Signs (+-1) of the level-k increment per leaf."""
        leaves = np.arange(self.n_leaves)
        return 2.0 * ((leaves >> (self.depth - 1 - k)) & 1) - 1.0

    def leaf_increments(self) -> np.ndarray:
        """Increment matrix of shape (2^depth, depth)."""
        sq = np.sqrt(self.mesh.dt)
        return sq * np.stack([self.step_signs(k) for k in range(self.depth)], axis=1)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_leaves, self.leaf_probability)


def build_tree(mesh: TimeMesh, cap: int = DEFAULT_TREE_CAP) -> BernoulliTree:
    """Build the exact-filtration tree; depth beyond `cap` is refused."""
    if mesh.steps > cap:
        raise ResourceError(f"tree depth {mesh.steps} exceeds cap {cap}")
    return BernoulliTree(mesh=mesh)


def conditional_expectation(tree: BernoulliTree, leaf_values: np.ndarray,
                            level: int) -> np.ndarray:
    """E[. | F_{t_level}] of leaf-indexed values, exact on the tree.

    `leaf_values` has shape (2^depth, ...); the result has shape
    (2^level, ...), one value per level-`level` history node.
    """
    leaf_values = np.asarray(leaf_values)
    if leaf_values.shape[0] != tree.n_leaves:
        raise ShapeError(
            f"leaf axis has length {leaf_values.shape[0]}, expected {tree.n_leaves}")
    if not 0 <= level <= tree.depth:
        raise ShapeError(f"level {level} outside [0, {tree.depth}]")
    n_nodes = 2**level
    block = tree.n_leaves // n_nodes
    return leaf_values.reshape((n_nodes, block) + leaf_values.shape[1:]).mean(axis=1)
