import numpy as np

from meanrev.factor_model import FactorModel


def random_factor_model(rng, n, k, xi_range=(0.5, 2.0)):
    xi = rng.uniform(*xi_range, n)
    raw = rng.normal(size=(n, k))
    a = rng.normal(size=(k, k))
    phi = a @ a.T + k * np.eye(k) if k else np.zeros((0, 0))
    phi = 0.5 * (phi + phi.T)
    return FactorModel(xi, raw, phi)
