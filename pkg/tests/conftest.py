"""Shared helpers: random model factories and the finite-difference oracle."""

from __future__ import annotations

import copy

import numpy as np

from smoe.model import Image, Kernel, SmoeModel, mse_loss


def random_model(rng: np.random.Generator, k: int, width: int, height: int) -> SmoeModel:
    kernels = []
    for _ in range(k):
        mu = rng.uniform([1.0, 1.0], [width - 2.0, height - 2.0])
        a = rng.uniform(-0.4, 0.6, size=3)
        a[0] += 0.3
        a[2] += 0.3
        kernels.append(
            Kernel(
                mu=mu,
                cholA=np.array([[a[0], 0.0], [a[1], a[2]]]),
                expert=rng.uniform(0.0, 1.0),
                alpha=rng.uniform(0.5, 2.0),
            )
        )
    return SmoeModel(kernels=kernels, width=width, height=height)


def random_image(rng: np.random.Generator, width: int, height: int) -> Image:
    return Image(rng.uniform(0.0, 1.0, size=(height, width)))


def objective(model: SmoeModel, target: Image, reg_weight: float) -> float:
    total = sum(k.alpha for k in model.kernels)
    return mse_loss(model, target) + reg_weight * total * total


def _perturbed(model: SmoeModel, idx: int, field: str, sub, delta: float) -> SmoeModel:
    out = copy.deepcopy(model)
    kernel = out.kernels[idx]
    if field == "mu":
        kernel.mu[sub] += delta
    elif field == "chol":
        kernel.cholA[sub] += delta
    elif field == "expert":
        kernel.expert += delta
    elif field == "alpha":
        kernel.alpha += delta
    else:
        raise ValueError(field)
    return out


def fd_gradient(model, target, reg_weight, idx, field, sub, step=1e-5) -> float:
    """Central finite difference of the training objective, one parameter."""
    up = objective(_perturbed(model, idx, field, sub, step), target, reg_weight)
    down = objective(_perturbed(model, idx, field, sub, -step), target, reg_weight)
    return (up - down) / (2.0 * step)


def gradient_entries(grads, idx):
    """(field, sub, analytic value) triples for kernel idx."""
    return [
        ("mu", 0, grads.d_mu[idx, 0]),
        ("mu", 1, grads.d_mu[idx, 1]),
        ("chol", (0, 0), grads.d_cholA[idx, 0, 0]),
        ("chol", (1, 0), grads.d_cholA[idx, 1, 0]),
        ("chol", (1, 1), grads.d_cholA[idx, 1, 1]),
        ("expert", None, grads.d_expert[idx]),
        ("alpha", None, grads.d_alpha[idx]),
    ]
