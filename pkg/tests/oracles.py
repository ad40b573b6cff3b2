"""Independent reference computations used only by the tests.

Each oracle takes a different route to the quantity under test than the
library does (normal equations instead of projection, eigendecomposition
instead of SVD, finite differences instead of backprop).
"""

import numpy as np

from bolt.spectral import SpectralBasis


def random_orthonormal(rng, rows, cols):
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q


def random_basis(rng, m, n, r, name="L"):
    return SpectralBasis(random_orthonormal(rng, m, r), random_orthonormal(rng, n, r), r, r, name)


def normal_equation_diagonal(m, u, v):
    """Least-squares coefficients of M on the rank-1 atoms u_j v_j^T.

    Builds the design matrix A with columns vec(u_j v_j^T) and solves
    (A^T A) c = A^T vec(M) directly, never forming U^T M V.
    """
    atoms = np.stack([np.outer(u[:, j], v[:, j]).ravel() for j in range(u.shape[1])], axis=1)
    return np.linalg.solve(atoms.T @ atoms, atoms.T @ m.ravel())


def whitening_oracle(x, eps=0.0):
    """x (x^T x + eps I)^{-1/2} through a symmetric eigendecomposition."""
    lam, q = np.linalg.eigh(x.T @ x + eps * np.eye(x.shape[1]))
    return x @ (q * lam ** -0.5) @ q.T


def numerical_rank(m, rtol):
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s > rtol * s[0])) if s[0] > 0 else 0


def central_difference(f, x, h=1e-6):
    """Gradient of scalar f at vector x by central differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        grad.flat[i] = (f(x + step) - f(x - step)) / (2 * h)
    return grad


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.abs(b))
