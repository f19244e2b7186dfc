"""Deep linear factorization ``W = W_L ... W_1`` fitted to masked observations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .matrix import Mask, Mat, as_mat, derive_seed, gaussian, load_csv, save_csv


@dataclass
class WeightStack:
    """Trainable layers ``W_1 ... W_L``; layer ``l`` maps ``n_{l-1} -> n_l``.

    ``W_0`` is the fixed identity and is not stored.
    """

    layers: list[Mat]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a weight stack needs at least one layer")
        self.layers = [np.asarray(w, dtype=np.float64) for w in self.layers]
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.shape[1] != lower.shape[0]:
                raise ValueError(
                    f"layer shapes do not chain: {lower.shape} then {upper.shape}"
                )

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].shape[1]] + [w.shape[0] for w in self.layers]

    @property
    def shape(self) -> tuple[int, int]:
        return self.layers[-1].shape[0], self.layers[0].shape[1]

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.layers)

    def copy(self) -> WeightStack:
        return WeightStack([w.copy() for w in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.layers])

    def with_flat(self, theta: np.ndarray) -> WeightStack:
        """A new stack with the same shapes holding the parameters ``theta``."""
        out, pos = [], 0
        for w in self.layers:
            out.append(np.asarray(theta[pos : pos + w.size]).reshape(w.shape).copy())
            pos += w.size
        if pos != len(theta):
            raise ValueError(f"expected {pos} parameters, got {len(theta)}")
        return WeightStack(out)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.layers)

    def layer_norms(self) -> list[float]:
        """Spectral norm of every layer (the ``M`` bound diagnostic)."""
        return [float(np.linalg.norm(w, 2)) for w in self.layers]


@dataclass
class Problem:
    """Masked completion problem.

    ``target`` holds the observed entries and is zero elsewhere.
    ``ground_truth`` is the noise-free matrix, kept for scoring only.
    """

    target: Mat
    mask: Mask
    ground_truth: Optional[Mat] = None
    _weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.target = as_mat(self.target)
        if self.target.shape != self.mask.shape:
            raise ValueError(f"target {self.target.shape} vs mask {self.mask.shape}")
        if np.any(self.target[~self.mask.observed] != 0):
            raise ValueError("target must be zero outside the mask")
        if self.ground_truth is not None:
            self.ground_truth = as_mat(self.ground_truth)
            if self.ground_truth.shape != self.target.shape:
                raise ValueError("ground_truth shape does not match target")
        self._weights = self.mask.observed.astype(np.float64)

    @classmethod
    def from_matrix(cls, full: Mat, mask: Optional[Mask] = None, ground_truth=None):
        """Observe ``full`` through ``mask`` (all entries when mask is None)."""
        full = as_mat(full)
        if mask is None:
            mask = Mask.full(*full.shape)
        return cls(np.where(mask.observed, full, 0.0), mask, ground_truth)

    @property
    def shape(self) -> tuple[int, int]:
        return self.target.shape

    @cached_property
    def full_mask(self) -> bool:
        return bool(self.mask.observed.all())


def init_balanced(dims: Sequence[int], std: float, seed: int) -> WeightStack:
    """Small i.i.d. Gaussian layers, approximately balanced for small ``std``.

    ``dims = [n_0, n_1, ..., n_L]``. Each layer draws from its own substream
    of ``seed``, so changing the depth does not reshuffle the lower layers.
    """
    dims = list(dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError("dims needs at least two positive entries")
    if std < 0:
        raise ValueError("std must be non-negative")
    return WeightStack(
        [
            gaussian(dims[l + 1], dims[l], std, derive_seed(seed, "layer", l))
            for l in range(len(dims) - 1)
        ]
    )


def product(stack: WeightStack) -> Mat:
    """End-to-end matrix ``W_L W_{L-1} ... W_1``."""
    out = stack.layers[0]
    for w in stack.layers[1:]:
        out = w @ out
    return out


def _check(stack: WeightStack, prob: Problem):
    if stack.shape != prob.shape:
        raise ValueError(f"stack produces {stack.shape}, problem is {prob.shape}")


def residual(stack: WeightStack, prob: Problem) -> Mat:
    """Masked residual ``P_mask(W - S)``, the gradient of the loss in ``W``."""
    _check(stack, prob)
    return (product(stack) - prob.target) * prob._weights


def loss(stack: WeightStack, prob: Problem) -> float:
    r = residual(stack, prob)
    return 0.5 * float(np.vdot(r, r))


def layer_gradients(stack: WeightStack, prob: Problem) -> list[Mat]:
    return loss_and_gradients(stack, prob)[1]


def loss_and_gradients(stack: WeightStack, prob: Problem) -> tuple[float, list[Mat]]:
    """Loss and ``dphi/dW_l = W_{l+1:L}^T R W_{1:l-1}^T`` for every layer."""
    _check(stack, prob)
    layers = stack.layers
    # prefixes[l] = W_l ... W_1, with prefixes[0] standing for the identity
    prefixes: list[Optional[Mat]] = [None, layers[0]]
    for w in layers[1:]:
        prefixes.append(w @ prefixes[-1])
    r = (prefixes[-1] - prob.target) * prob._weights
    grads: list[Mat] = [None] * len(layers)  # type: ignore[list-item]
    back = r
    for l in range(len(layers) - 1, -1, -1):
        below = prefixes[l]
        grads[l] = back if below is None else back @ below.T
        if l:
            back = layers[l].T @ back
    return 0.5 * float(np.vdot(r, r)), grads


def balancedness(stack: WeightStack) -> float:
    """Smallest ``theta`` with ``||W_{l+1}^T W_{l+1} - W_l W_l^T||_F <= theta`` for all l."""
    theta = 0.0
    for lower, upper in zip(stack.layers, stack.layers[1:]):
        gap = upper.T @ upper - lower @ lower.T
        theta = max(theta, float(np.linalg.norm(gap, "fro")))
    return theta


def save_checkpoint(stack: WeightStack, directory, iteration: int = 0) -> Path:
    """Write ``layer_XX.csv`` files plus ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for l, w in enumerate(stack.layers, start=1):
        name = f"layer_{l:02d}.csv"
        save_csv(w, directory / name)
        files.append(name)
    manifest = {
        "dims": stack.dims,
        "depth": stack.depth,
        "iteration": int(iteration),
        "layers": files,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[WeightStack, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    for key in ("dims", "depth", "layers"):
        if key not in manifest:
            raise ValueError(f"{directory / 'manifest.json'}: missing key {key!r}")
    stack = WeightStack([load_csv(directory / name) for name in manifest["layers"]])
    if stack.dims != list(manifest["dims"]) or stack.depth != manifest["depth"]:
        raise ValueError(
            f"{directory}: layer files give dims {stack.dims}, "
            f"manifest says {manifest['dims']}"
        )
    return stack, manifest


def save_problem(prob: Problem, path) -> None:
    """Problem file: JSON with the observed target and the mask as 0/1 rows."""
    payload = {
        "target": prob.target.tolist(),
        "mask": prob.mask.observed.astype(int).tolist(),
    }
    if prob.ground_truth is not None:
        payload["ground_truth"] = prob.ground_truth.tolist()
    Path(path).write_text(json.dumps(payload) + "\n")


def load_problem(path) -> Problem:
    payload = json.loads(Path(path).read_text())
    target = as_mat(payload["target"])
    mask = Mask(np.asarray(payload.get("mask", np.ones(target.shape)), dtype=bool))
    return Problem.from_matrix(target, mask, payload.get("ground_truth"))
