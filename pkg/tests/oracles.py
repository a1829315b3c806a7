"""Independent reference computations shared by the tests."""

import numpy as np


def cosine_features(W, phi, Z):
    # Element-wise evaluation, deliberately not vectorised like the package.
    Z = np.atleast_2d(Z)
    out = np.empty((Z.shape[0], len(phi)))
    for t in range(Z.shape[0]):
        for j in range(len(phi)):
            out[t, j] = np.cos(sum(W[j][k] * Z[t][k] for k in range(Z.shape[1])) + phi[j])
    return out


def gp_regression(W, S, phi, v, noise_var, Z, X, Zs):
    """Function-space GP regression with the Mercer kernel and the nominal prior mean.

    Returns predictive mean and latent variance at ``Zs`` via a T x T solve.
    """
    P, Ps = cosine_features(W, phi, Z), cosine_features(W, phi, Zs)
    K = P @ np.diag(v) @ P.T
    Ks = Ps @ np.diag(v) @ P.T
    Kss = Ps @ np.diag(v) @ Ps.T
    m, ms = P @ S, Ps @ S
    G = K + noise_var * np.eye(len(X))
    mean = ms + Ks @ np.linalg.solve(G, X - m)
    var = np.diag(Kss - Ks @ np.linalg.solve(G, Ks.T))
    return mean, var


def random_instance(rng, max_dim=3, max_M=10, max_T=20):
    Dz = int(rng.integers(1, max_dim + 1))
    M = int(rng.integers(1, max_M + 1))
    T = int(rng.integers(1, max_T + 1))
    return dict(
        W=rng.normal(size=(M, Dz)),
        S=rng.uniform(0.1, 2.0, M),
        phi=rng.uniform(-np.pi, np.pi, M),
        Z=rng.normal(size=(T, Dz)),
        X=rng.normal(size=T),
        Zs=rng.normal(size=(5, Dz)),
    )
