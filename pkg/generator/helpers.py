"""Seeded synthetic matrices and data sets for tests and experiments."""

import numpy as np

from linalg import random_orthonormal


def matrix_with_spectrum(rng, n, m, singular_values):
    """Random n x m matrix whose singular values are exactly `singular_values`."""

    s = np.asarray(singular_values, dtype=np.float64)
    k = s.shape[0]
    u = random_orthonormal(rng, n, k)
    v = random_orthonormal(rng, m, k)
    return (u * s) @ v.T


def well_conditioned_matrix(rng, n, m, low=1.0, high=2.0):
    """Full-rank n x m matrix with singular values drawn from [low, high]."""

    s = np.sort(rng.uniform(low, high, size=min(n, m)))[::-1]
    return matrix_with_spectrum(rng, n, m, s)


def planar_data(rng, n_samples, label_width=4):
    """Points in the unit disk of the xy-plane with labels from a small ReLU net.

    Returns (X, y) with X of shape (n_samples, 3) and X[:, 2] exactly zero.
    """

    radius = np.sqrt(rng.uniform(0.0, 1.0, n_samples))
    angle = rng.uniform(0.0, 2.0 * np.pi, n_samples)
    x = np.zeros((n_samples, 3))
    x[:, 0] = radius * np.cos(angle)
    x[:, 1] = radius * np.sin(angle)

    first = rng.standard_normal((3, label_width))
    second = rng.standard_normal(label_width)
    y = np.maximum(x @ first, 0.0) @ second
    return x, y
