"""Prony modal analysis and its coordinator-based consensus variant.

``prony_fit`` solves the classic two-stage problem: fit linear-prediction
coefficients shared by all channels (the modes are common across the
system), root the characteristic polynomial, and map each oscillatory pole
``z`` to a continuous-time mode via ``lambda = fs * log(z)``.

Plain least squares on noisy samples is biased (the regressors carry the
same noise as the targets), which for lightly damped modes translates into
large damping errors.  The second stage therefore re-solves the system
whitened by the residual coloring implied by the first-stage polynomial, a
standard two-stage generalized-least-squares refinement that keeps the
model order at exactly ``2L``.

``admm_prony`` runs the same per-channel quadratics without stacking raw
measurements at a single solver: each node iterates a closed-form
regularized local fit against a coordinator broadcast, and the coordinator
averages the returned coefficient vectors until the average stops moving.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DegenerateSignalError, NonConvergenceError, ValidationError
from .signal_model import MeasurementWindow, Mode

logger = logging.getLogger(__name__)

_MIN_IMAG = 1e-9

DEFAULT_RHO = 0.01
DEFAULT_TOL = 0.01
DEFAULT_MAX_ITERS = 500
DEFAULT_REFINEMENTS = 1


@dataclass(frozen=True)
class PronyModel:
    """Fitted linear-prediction model: coefficients a_i of
    ``y[k] = sum_i a_i y[k-i]``, the polynomial roots and the mapped modes."""

    order: int
    coeffs: np.ndarray
    poles: np.ndarray
    modes: tuple[Mode, ...]


@dataclass
class AdmmState:
    """Per-iteration consensus bookkeeping for the distributed fit."""

    local: np.ndarray       # (M, order) per-node coefficient vectors
    duals: np.ndarray       # (M, order)
    average: np.ndarray     # (order,) coordinator broadcast
    rho: float
    tol: float


def _prediction_rows(samples_row: np.ndarray, order: int):
    n = samples_row.size
    cols = [samples_row[order - 1 - i:n - 1 - i] for i in range(order)]
    return np.column_stack(cols), samples_row[order:]


def _whitening_band(coeffs: np.ndarray, n_rows: int) -> np.ndarray:
    """Banded (upper form) Gram matrix of the residual stencil
    ``[1, -a_1, ..., -a_p]``, i.e. the covariance coloring a white
    innovation picks up when passed through the prediction error filter."""
    order = coeffs.size
    stencil = np.concatenate([[1.0], -coeffs])
    band = np.array([(stencil[:order + 1 - d] * stencil[d:]).sum()
                     for d in range(order + 1)])
    ab = np.zeros((order + 1, n_rows))
    ab[-1, :] = band[0]
    for d in range(1, order + 1):
        ab[-1 - d, d:] = band[d]
    return ab


def _whiten_system(a_mat: np.ndarray, y_vec: np.ndarray, coeffs: np.ndarray):
    """Apply the inverse residual-coloring weight to (A, y): returns
    ``(A^T W A, A^T W y)`` with ``W = (T T^T)^{-1}`` solved in banded form."""
    ab = _whitening_band(coeffs, y_vec.size)
    try:
        solved = scipy.linalg.solveh_banded(
            ab, np.column_stack([y_vec, a_mat]), lower=False, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise DegenerateSignalError(f"whitening solve failed: {exc}") from None
    return a_mat.T @ solved[:, 1:], a_mat.T @ solved[:, 0]


def _modes_from_coeffs(coeffs: np.ndarray, fs: float,
                       l_modes: int) -> tuple[PronyModel, list[Mode]]:
    order = coeffs.size
    poly = np.concatenate([[1.0], -coeffs])
    poles = np.roots(poly)
    lam = fs * np.log(poles.astype(complex))
    modes = []
    for lm in lam:
        if abs(lm.imag) < _MIN_IMAG:
            warnings.warn("discarding non-oscillatory pole (pure decay)", stacklevel=3)
            continue
        if lm.imag > 0:
            modes.append(Mode(float(lm.imag), float(-lm.real)))
    if len(modes) < l_modes:
        raise DegenerateSignalError(
            f"recovered {len(modes)} oscillatory modes, expected {l_modes}")
    modes.sort(key=lambda m: m.omega)
    return PronyModel(order, coeffs, poles, tuple(modes)), modes[:l_modes]


def _validate_window(window: MeasurementWindow, l_modes: int):
    if l_modes < 1:
        raise ValidationError("l_modes must be >= 1")
    if window.n_samples <= 4 * l_modes + 2:
        raise ValidationError(
            f"need more than {4 * l_modes + 2} samples per channel for L={l_modes}")


def prony_fit(window: MeasurementWindow, l_modes: int,
              refinements: int = DEFAULT_REFINEMENTS) -> list[Mode]:
    """Estimate ``l_modes`` shared modes by stacked-channel linear prediction.

    The model order is exactly ``2 * l_modes``.  ``refinements`` counts the
    whitened re-solves after the initial least squares (0 reproduces the
    biased plain-LS fit; the default single refinement removes the bulk of
    the noise bias).  Rank deficiency of the prediction matrix raises
    :class:`DegenerateSignalError`.
    """
    _validate_window(window, l_modes)
    order = 2 * l_modes
    systems = [_prediction_rows(window.samples[c], order)
               for c in range(window.n_channels)]
    a_all = np.vstack([s[0] for s in systems])
    y_all = np.concatenate([s[1] for s in systems])
    coeffs, _, rank, _ = np.linalg.lstsq(a_all, y_all, rcond=None)
    if rank < order:
        raise DegenerateSignalError("prediction matrix is rank deficient")
    for _ in range(refinements):
        lhs = np.zeros((order, order))
        rhs = np.zeros(order)
        for a_c, y_c in systems:
            g, c = _whiten_system(a_c, y_c, coeffs)
            lhs += g
            rhs += c
        try:
            refined = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            raise DegenerateSignalError("whitened normal equations are singular") from None
        if np.abs(refined - coeffs).max() < 1e-14:
            coeffs = refined
            break
        coeffs = refined
    _, modes = _modes_from_coeffs(coeffs, window.fs, l_modes)
    return modes


def admm_prony(
    window: MeasurementWindow,
    l_modes: int,
    rho: float = DEFAULT_RHO,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> tuple[list[Mode], int]:
    """Consensus fit of the shared prediction coefficients.

    Every node first runs its private linear estimation (the same two-stage
    whitened fit as :func:`prony_fit`, on local data only) and sends it to
    the coordinator.  Per iteration node m then trades off its local fit
    quality against the broadcast average,

        b_m = argmin  q_m(b) + (rho/2) ||b - zbar + u_m||^2

    where ``q_m`` is its whitened least-squares quadratic, solved in closed
    form; the coordinator re-averages ``zbar = mean(b_m + u_m)`` and duals
    accumulate the consensus gap.  Iteration stops once the infinity-norm
    change of the broadcast drops below ``tol``.
    """
    if rho <= 0 or tol <= 0:
        raise ValidationError("rho and tol must be positive")
    _validate_window(window, l_modes)
    order = 2 * l_modes
    m_channels = window.n_channels

    grams, rhs, locals_ = [], [], []
    for c in range(m_channels):
        a_c, y_c = _prediction_rows(window.samples[c], order)
        sol, _, rank, _ = np.linalg.lstsq(a_c, y_c, rcond=None)
        if rank < order:
            raise DegenerateSignalError(f"channel {c} prediction matrix is rank deficient")
        g, b = _whiten_system(a_c, y_c, sol)
        try:
            local = np.linalg.solve(g, b)
        except np.linalg.LinAlgError:
            raise DegenerateSignalError(
                f"channel {c} whitened normal equations are singular") from None
        grams.append(g + 0.5 * rho * np.eye(order))
        rhs.append(b)
        locals_.append(local)

    state = AdmmState(
        local=np.vstack(locals_),
        duals=np.zeros((m_channels, order)),
        average=np.vstack(locals_).mean(axis=0),
        rho=rho,
        tol=tol,
    )
    for it in range(1, max_iters + 1):
        for c in range(m_channels):
            state.local[c] = np.linalg.solve(
                grams[c],
                rhs[c] + 0.5 * rho * (state.average - state.duals[c]))
        new_avg = (state.local + state.duals).mean(axis=0)
        state.duals += state.local - new_avg
        delta = np.abs(new_avg - state.average).max()
        state.average = new_avg
        if delta < tol:
            primal = np.abs(state.local - state.average).max()
            logger.debug("consensus fit converged in %d iterations (primal gap %.3e)",
                         it, primal)
            _, modes = _modes_from_coeffs(state.average, window.fs, l_modes)
            return modes, it
    raise NonConvergenceError(
        f"consensus fit did not converge within {max_iters} iterations", state.average)


def residue_fit(window: MeasurementWindow, modes) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel polar amplitude and phase of each mode by least squares.

    Fits ``sum_l a_l exp(-sigma_l t) cos(omega_l t + phi_l)`` per channel
    against a damped cos/sin basis.  Returns ``(amplitudes, phases)`` both of
    shape (M, L).  Near-duplicate modes make the basis ill conditioned and
    are rejected.
    """
    modes = list(modes)
    if not modes:
        raise ValidationError("at least one mode required")
    omegas = np.array([m.omega for m in modes])
    if np.unique(omegas).size != omegas.size:
        raise ValidationError("modes must be distinct")
    t = window.times() - window.t0
    basis = np.empty((window.n_samples, 2 * len(modes)))
    for li, mode in enumerate(modes):
        env = np.exp(-mode.sigma * t)
        basis[:, 2 * li] = env * np.cos(mode.omega * t)
        basis[:, 2 * li + 1] = env * np.sin(mode.omega * t)
    cond = np.linalg.cond(basis)
    if not np.isfinite(cond) or cond > 1e10:
        raise ValidationError(f"mode basis ill conditioned (cond={cond:.2e}); "
                              "modes too close together")
    coeffs, _, _, _ = np.linalg.lstsq(basis, window.samples.T, rcond=None)
    alphas = coeffs[0::2].T   # (M, L) cosine weights
    betas = coeffs[1::2].T    # (M, L) sine weights
    amplitudes = np.hypot(alphas, betas)
    phases = np.arctan2(-betas, alphas)
    return amplitudes, phases
