"""Scaling structure of quasi-homogeneous classifiers.

A network is quasi-homogeneous when scaling each parameter group j by
e^{alpha * lambda_j} scales every output by e^{alpha}.  The per-group
exponents are estimated from the derivative identity

    sum_j lambda_j * (zeta_j . grad_j Phi_c(x)) = Phi_c(x)

evaluated at random inputs (plus optional second-order rows), solved as a
nonnegative least-squares problem, and validated by direct rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import autodiff as ad
from .models import (ParameterVector, make_leaves, mlp_apply, mlp_apply_np,
                     spec_group_shapes)

MASK_REL_TOL = 1e-6
RIDGE = 1e-12


@dataclass
class QuasiHomogeneousProfile:
    """Per-group scaling exponents and derived quantities."""

    lambdas: dict  # group name -> lambda_j >= 0
    residual: float = 0.0

    def __post_init__(self):
        if not self.lambdas:
            raise ValueError("profile needs at least one group")
        if any(v < 0 for v in self.lambdas.values()):
            raise ValueError("lambda values must be nonnegative")

    @property
    def lambda_max(self):
        return max(self.lambdas.values())

    @property
    def tilde_mask(self):
        """Groups whose lambda attains lambda_max (within relative tol)."""
        lmax = self.lambda_max
        return {name for name, v in self.lambdas.items()
                if v >= lmax * (1.0 - MASK_REL_TOL)}

    def to_json(self):
        return {"lambdas": dict(self.lambdas), "residual": self.residual,
                "lambda_max": self.lambda_max,
                "tilde_mask": sorted(self.tilde_mask)}

    @staticmethod
    def from_json(obj):
        return QuasiHomogeneousProfile(dict(obj["lambdas"]),
                                       float(obj["residual"]))


@dataclass
class DerivativeEquationSystem:
    """Linear system rows in the per-group lambda unknowns."""

    matrix: np.ndarray  # (n_rows, n_groups)
    rhs: np.ndarray
    group_names: list
    provenance: list = field(default_factory=list)  # (sample, output, order)
    skipped: int = 0


def _check_groups(params, lambdas):
    if set(params.groups) != set(lambdas):
        raise ValueError(
            f"profile groups {sorted(lambdas)} do not match parameter "
            f"groups {sorted(params.groups)}"
        )


def scale_params(params, profile, alpha):
    """psi_alpha: scale group j by e^{alpha * lambda_j}."""
    _check_groups(params, profile.lambdas)
    out = params.copy()
    for name, lam in profile.lambdas.items():
        out.group(name)[:] *= np.exp(alpha * lam)
    return out


def seminorm_sq(params, weights):
    """sum_j w_j * ||zeta_j||^2 for per-group weights w."""
    total = 0.0
    for name, w in weights.items():
        g = params.group(name)
        total += w * float(g @ g)
    return total


def normalize(params, profile):
    """Find tau with ||psi_tau(zeta)||_Lambda^2 = 1; returns (zeta_bar, tau).

    The map tau -> sum_j lambda_j e^{2 tau lambda_j} ||zeta_j||^2 is strictly
    increasing, so bisection on an expanding bracket converges.
    """
    _check_groups(params, profile.lambdas)
    norms = {name: float(params.group(name) @ params.group(name))
             for name in profile.lambdas}

    def seminorm_at(tau):
        return sum(lam * np.exp(2.0 * tau * lam) * norms[name]
                   for name, lam in profile.lambdas.items())

    if seminorm_at(0.0) <= 0.0:
        raise ValueError("zero seminorm: parameters are degenerate for "
                         "this profile")
    lo, hi = -1.0, 1.0
    while seminorm_at(lo) > 1.0:
        lo *= 2.0
    while seminorm_at(hi) < 1.0:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if seminorm_at(mid) < 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-16 * max(1.0, abs(hi)):
            break
    tau = 0.5 * (lo + hi)
    return scale_params(params, profile, tau), tau


def default_probe_samples(spec, k=32, seed=0):
    """Standard-normal probe inputs in the classifier's input space."""
    mlp = spec if hasattr(spec, "widths") else spec.mlp()
    rng = np.random.default_rng(seed)
    return rng.standard_normal((k, mlp.in_dim))


def build_derivative_equations(spec, params, samples, max_order=1):
    """Assemble the linear system in the per-group lambdas.

    First-order rows encode the derivative identity per (sample, output).
    With ``max_order=2``, one probe coordinate per group adds rows of the
    lifted second-order identity

        sum_j lambda_j (zeta_j . grad2_{j,p} Phi) + lambda_{g(p)} grad_p Phi
            = grad_p Phi,

    which stays linear in lambda.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise ValueError("at least one probe sample is required")
    if max_order not in (1, 2):
        raise ValueError("max_order must be 1 or 2")
    names = [name for name, _ in spec_group_shapes(spec)]
    n_out = (spec if hasattr(spec, "widths") else spec.mlp()).widths[-1]
    rows, rhs, provenance = [], [], []
    skipped = 0

    # one probe coordinate per group: the largest-magnitude entry
    probes = {}
    for name in names:
        g = params.group(name)
        probes[name] = int(np.argmax(np.abs(g)))

    for k, x in enumerate(samples):
        leaves = make_leaves(spec, params)
        x_leaf = ad.tensor(x)
        logits = mlp_apply(spec, leaves, x_leaf)
        for c in range(n_out):
            target = ad.tsum(ad.slice_axis(logits, 0, c, c + 1))
            cots = ad.grad(target, [leaves[n] for n in names])
            coeff = np.array([float(np.sum(leaves[n].value * ct.value))
                              for n, ct in zip(names, cots)])
            b = float(target.value)
            if not (np.all(np.isfinite(coeff)) and np.isfinite(b)):
                skipped += 1
                continue
            rows.append(coeff)
            rhs.append(b)
            provenance.append((k, c, 1))
            if max_order == 2 and k < 2:
                for p_name in names:
                    p_idx = probes[p_name]
                    flat_cot = ad.reshape(cots[names.index(p_name)],
                                          (leaves[p_name].value.size,))
                    s = ad.tsum(ad.slice_axis(flat_cot, 0, p_idx, p_idx + 1))
                    second = ad.grad(s, [leaves[n] for n in names],
                                     allow_unused=True)
                    coeff2 = np.array(
                        [float(np.sum(leaves[n].value * sc.value))
                         for n, sc in zip(names, second)])
                    s_val = float(s.value)
                    coeff2[names.index(p_name)] += s_val
                    if not (np.all(np.isfinite(coeff2))
                            and np.isfinite(s_val)):
                        skipped += 1
                        continue
                    rows.append(coeff2)
                    rhs.append(s_val)
                    provenance.append((k, c, 2))

    order = sorted(range(len(rows)), key=lambda i: provenance[i])
    return DerivativeEquationSystem(
        matrix=np.array([rows[i] for i in order]),
        rhs=np.array([rhs[i] for i in order]),
        group_names=names,
        provenance=[provenance[i] for i in order],
        skipped=skipped,
    )


def solve_lambda(system):
    """Nonnegative least-squares solve of the derivative-equation system.

    A tiny ridge term makes the solution unique when the system is
    rank-deficient, selecting the minimum-Euclidean-norm point of the
    nonnegative solution set.
    """
    a, b = system.matrix, system.rhs
    if a.size == 0 or not np.any(a):
        raise ValueError("derivative-equation system is empty or all zero")
    scale = np.max(np.abs(a))
    ridge = np.sqrt(RIDGE) * scale
    a_aug = np.vstack([a, ridge * np.eye(a.shape[1])])
    b_aug = np.concatenate([b, np.zeros(a.shape[1])])
    lam, _ = scipy.optimize.nnls(a_aug, b_aug)
    residual = float(np.linalg.norm(a @ lam - b)
                     / (np.linalg.norm(b) + 1e-12))
    return QuasiHomogeneousProfile(
        lambdas=dict(zip(system.group_names, lam)),
        residual=residual,
    )


def verify_lambda(spec, params, profile, alphas, samples):
    """Max relative deviation of Phi(x; psi_alpha(zeta)) from e^alpha Phi."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(alphas) == 0 or samples.shape[0] == 0:
        raise ValueError("alpha grid and samples must be nonempty")
    base = mlp_apply_np(spec, params, samples)
    worst = 0.0
    for alpha in alphas:
        scaled = scale_params(params, profile, alpha)
        got = mlp_apply_np(spec, scaled, samples)
        want = np.exp(alpha) * base
        dev = np.abs(got - want) / (np.abs(want) + 1e-9)
        worst = max(worst, float(dev.max()))
    return worst


def lambda_bar(profile, alpha):
    """Per-group weights of tilde-Lambda * e^{alpha (2 Lambda - I)}."""
    mask = profile.tilde_mask
    lmax = profile.lambda_max
    return {name: (lmax * np.exp(alpha * (2.0 * lam - 1.0))
                   if name in mask else 0.0)
            for name, lam in profile.lambdas.items()}


def estimate_profile(spec, params, k=32, max_order=1, seed=0):
    """Convenience wrapper: probe, assemble, solve."""
    samples = default_probe_samples(spec, k=k, seed=seed)
    system = build_derivative_equations(spec, params, samples,
                                        max_order=max_order)
    return solve_lambda(system), samples
