"""
Training objectives for ArtiField
Photometric, Eikonal, skinning-weight, latent-regularization and scan-prior
losses, plus the sampling of Eikonal query points.
"""

from typing import Callable, Dict, Optional, Tuple

import numpy as np

from ..config import LossWeights
from .errors import ShapeError
from .tensor import ArrayLike, Tensor, as_tensor, grad, l1_norm, mean, norm, parameter, tabs

SdfFn = Callable[[Tensor], Tensor]


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: prediction {a.shape} and target {b.shape} differ")


def loss_color(c: ArrayLike, c_hat: ArrayLike) -> Tensor:
    """Mean absolute error over every pixel and channel."""
    c, c_hat = as_tensor(c), as_tensor(c_hat)
    _same_shape(c, c_hat, "loss_color")
    return mean(tabs(c - c_hat))


def loss_weights(w: ArrayLike, w_hat: ArrayLike) -> Tensor:
    """Per-point L1 distance between weight vectors (N, n_b), averaged over points."""
    w, w_hat = as_tensor(w), as_tensor(w_hat)
    _same_shape(w, w_hat, "loss_weights")
    return mean(l1_norm(w - w_hat, axis=-1))


def loss_reg(shape_code: ArrayLike, color_code: Optional[ArrayLike] = None) -> Tensor:
    """‖β+‖₂ + ‖γ‖₂ (the color term is dropped when no color code is given)."""
    total = norm(as_tensor(shape_code), axis=-1)
    if color_code is not None:
        total = total + norm(as_tensor(color_code), axis=-1)
    return total


def spatial_gradient(sdf_fn: SdfFn, points: ArrayLike, create_graph: bool = True) -> Tuple[Tensor, Tensor]:
    """Field values (N,) and ∇ₓ (N, 3) at ``points``.

    With ``create_graph`` the gradient stays on the tape, so losses built from
    it differentiate into the network parameters.
    """
    x = parameter(as_tensor(points).data)
    s = sdf_fn(x)
    if s.shape != (x.shape[0],):
        raise ShapeError(f"sdf function must return ({x.shape[0]},) values, got {s.shape}")
    (gradient,) = grad([s], [x], create_graph=create_graph)
    return s, gradient


def eikonal_residual(gradient: ArrayLike) -> Tensor:
    g = as_tensor(gradient)
    return mean((norm(g, axis=-1) - 1.0) ** 2)


def loss_eikonal(points: ArrayLike, sdf_fn: SdfFn) -> Tensor:
    """Mean (‖∇ₓG‖ − 1)² over the query points."""
    _, gradient = spatial_gradient(sdf_fn, points)
    return eikonal_residual(gradient)


def loss_surface(s: ArrayLike) -> Tensor:
    return mean(tabs(as_tensor(s)))


def loss_normals(gradient: ArrayLike, normals: ArrayLike) -> Tensor:
    """Mean L1 norm of ∇G − N."""
    gradient, normals = as_tensor(gradient), as_tensor(normals)
    _same_shape(gradient, normals, "loss_normals")
    return mean(l1_norm(gradient - normals, axis=-1))


def prior_terms(x_surf: ArrayLike, normals: ArrayLike, sdf_fn: SdfFn) -> Dict[str, Tensor]:
    s, gradient = spatial_gradient(sdf_fn, x_surf)
    return {"surf": loss_surface(s), "normal": loss_normals(gradient, normals)}


def loss_prior(x_surf: ArrayLike, normals: ArrayLike, sdf_fn: SdfFn,
               weights: Optional[LossWeights] = None) -> Tensor:
    """λ_surf · mean|G(x_surf)| + λ_N · mean‖∇G(x_surf) − N(x_surf)‖₁"""
    weights = weights or LossWeights()
    terms = prior_terms(x_surf, normals, sdf_fn)
    return weights.surf * terms["surf"] + weights.normal * terms["normal"]


def sample_eikonal_points(surface_points: np.ndarray, box: np.ndarray, n: int,
                          rng: np.random.Generator, sigma: float = 0.01) -> Tuple[np.ndarray, np.ndarray]:
    """Eikonal query set: half Gaussian perturbations of surface samples, half uniform in ``box``.

    Returns:
        points (n, 3) and a mask that is True for the surface-adjacent half
    """
    surface_points = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    n_near = n // 2 if len(surface_points) else 0
    near = np.zeros((0, 3))
    if n_near:
        picks = surface_points[rng.integers(0, len(surface_points), size=n_near)]
        near = picks + rng.normal(0.0, sigma, size=picks.shape)
    uniform = rng.uniform(box[0], box[1], size=(n - n_near, 3))
    mask = np.concatenate([np.ones(n_near, dtype=bool), np.zeros(n - n_near, dtype=bool)])
    return np.concatenate([near, uniform], axis=0), mask


def weighted_total(terms: Dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Σ λ_k · term_k over the named terms; names match LossWeights fields."""
    total: Optional[Tensor] = None
    for name, value in terms.items():
        scaled = getattr(weights, name) * value
        total = scaled if total is None else total + scaled
    if total is None:
        raise ValueError("weighted_total needs at least one loss term")
    return total
