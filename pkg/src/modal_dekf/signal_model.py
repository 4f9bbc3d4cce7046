"""Damped-sinusoid state-space model shared by every estimator.

A ringdown measurement is a sum of L exponentially damped sinusoids whose
angular frequencies ``omega_l`` (rad/s) and damping factors ``sigma_l`` (1/s)
are common to all M channels, while amplitudes and phases differ per channel.
Each mode contributes a quadrature pair ``(xc, xs)`` per channel, and the
discrete-time dynamics rotate the pair by ``omega/fs`` while shrinking it by
``exp(-sigma/fs)``.

State vector layout (dimension ``2*M*L + 2*L``)::

    [a_1, ..., a_M, omega_1, sigma_1, ..., omega_L, sigma_L]
    a_m = (xc_{1,m}, xs_{1,m}, ..., xc_{L,m}, xs_{L,m})

Observation convention: channel m reads the sum of BOTH quadrature components
over its own 2L-entry amplitude block.  Since ``xc + xs`` of a rotating pair
equals ``sqrt(2) * r * cos(theta - pi/4)``, the fixed pi/4 offset is absorbed
by :func:`state_from_polar`, so a state built from polar ``(a, phi)``
reproduces ``a * exp(-sigma*k/fs) * cos(omega*k/fs + phi)`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

_QUARTER_TURN = math.pi / 4.0


def amplitude_dim(n_channels: int, l_modes: int) -> int:
    """Number of quadrature amplitude entries for a channel/mode count."""
    return 2 * n_channels * l_modes


def state_dim(n_channels: int, l_modes: int) -> int:
    """Full state dimension ``2*M*L + 2*L``."""
    return 2 * n_channels * l_modes + 2 * l_modes


def channels_from_dim(dim: int, l_modes: int) -> int:
    """Invert :func:`state_dim` for a given mode count."""
    amp = dim - 2 * l_modes
    if l_modes < 1 or amp <= 0 or amp % (2 * l_modes):
        raise ValidationError(f"state dimension {dim} is invalid for L={l_modes}")
    return amp // (2 * l_modes)


def damping_ratio(sigma: float, omega: float) -> float:
    """Normalized damping ``sigma / sqrt(sigma**2 + omega**2)``.

    The sign follows ``sigma``; negative values indicate growing
    oscillations.  Raises :class:`ValidationError` when both arguments are
    zero (the ratio is undefined there).
    """
    if sigma == 0.0 and omega == 0.0:
        raise ValidationError("damping ratio undefined for sigma = omega = 0")
    return sigma / math.hypot(sigma, omega)


@dataclass(frozen=True)
class Mode:
    """One oscillation mode: angular frequency (rad/s) and damping (1/s)."""

    omega: float
    sigma: float

    @property
    def freq_hz(self) -> float:
        return self.omega / (2.0 * math.pi)

    @property
    def zeta(self) -> float:
        return damping_ratio(self.sigma, self.omega)

    @classmethod
    def from_hz(cls, freq_hz: float, sigma: float) -> "Mode":
        return cls(2.0 * math.pi * freq_hz, sigma)


@dataclass(frozen=True)
class ModeSet:
    """Ordered collection of modes, canonicalized by strictly increasing omega.

    Synthesis and ground-truth use require every ``omega`` to be positive;
    duplicate frequencies are rejected so layouts stay deterministic.
    """

    modes: tuple[Mode, ...]

    def __post_init__(self):
        if not self.modes:
            raise ValidationError("ModeSet requires at least one mode")
        omegas = [m.omega for m in self.modes]
        if any(not math.isfinite(m.omega) or not math.isfinite(m.sigma) for m in self.modes):
            raise ValidationError("mode parameters must be finite")
        if any(w <= 0.0 for w in omegas):
            raise ValidationError("all omegas must be strictly positive")
        if any(b <= a for a, b in zip(omegas, omegas[1:])):
            raise ValidationError("omegas must be strictly increasing (duplicates rejected)")

    def __len__(self) -> int:
        return len(self.modes)

    def __iter__(self):
        return iter(self.modes)

    @property
    def omegas(self) -> np.ndarray:
        return np.array([m.omega for m in self.modes])

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([m.sigma for m in self.modes])

    @classmethod
    def from_pairs(cls, pairs) -> "ModeSet":
        return cls(tuple(Mode(float(w), float(s)) for w, s in pairs))

    @classmethod
    def from_hz(cls, pairs) -> "ModeSet":
        return cls(tuple(Mode.from_hz(float(f), float(s)) for f, s in pairs))


@dataclass(frozen=True)
class ChannelAmplitude:
    """Quadrature amplitude pairs of one channel, shape ``(L, 2)`` as
    ``[:, 0] = xc`` and ``[:, 1] = xs``."""

    pairs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=float)
        if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 1:
            raise ValidationError("ChannelAmplitude expects an (L, 2) array")
        object.__setattr__(self, "pairs", p)

    def __len__(self) -> int:
        return self.pairs.shape[0]

    def xc(self, l: int) -> float:
        return float(self.pairs[l, 0])

    def xs(self, l: int) -> float:
        return float(self.pairs[l, 1])


def state_from_polar(amplitude: float, phase: float) -> tuple[float, float]:
    """Quadrature pair ``(xc, xs)`` whose observed sum reproduces
    ``amplitude * cos(omega*k/fs + phase)`` under the block-sum observation.

    The pair has radius ``amplitude / sqrt(2)`` and angle ``phase + pi/4``.
    """
    if amplitude < 0:
        raise ValidationError("polar amplitude must be nonnegative")
    r = amplitude / math.sqrt(2.0)
    psi = phase + _QUARTER_TURN
    return (r * math.cos(psi), r * math.sin(psi))


def polar_from_state(xc: float, xs: float) -> tuple[float, float]:
    """Inverse of :func:`state_from_polar`; phase wrapped to (-pi, pi]."""
    a = math.hypot(xc, xs) * math.sqrt(2.0)
    if a == 0.0:
        return (0.0, 0.0)
    phi = math.atan2(xs, xc) - _QUARTER_TURN
    if phi <= -math.pi:
        phi += 2.0 * math.pi
    return (a, phi)


@dataclass(frozen=True)
class SystemState:
    """Full centralized state: per-channel quadrature amplitudes plus the
    shared mode block.

    ``amplitudes`` has shape ``(M, 2L)`` (channel-major, mode-minor,
    interleaved cos/sin); ``mode_params`` has shape ``(L, 2)`` as
    ``(omega, sigma)`` rows.  Mode entries are stored raw so that filter
    outputs remain representable even when estimates wander; use
    :meth:`mode_set` for the validated container.
    """

    amplitudes: np.ndarray
    mode_params: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=float)
        mp = np.asarray(self.mode_params, dtype=float)
        if amps.ndim != 2 or mp.ndim != 2 or mp.shape[1] != 2:
            raise ValidationError("SystemState expects (M, 2L) amplitudes and (L, 2) mode_params")
        if amps.shape[1] != 2 * mp.shape[0]:
            raise ValidationError(
                f"amplitude width {amps.shape[1]} inconsistent with L={mp.shape[0]}"
            )
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "mode_params", mp)

    @property
    def n_channels(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def l_modes(self) -> int:
        return self.mode_params.shape[0]

    @property
    def dim(self) -> int:
        return state_dim(self.n_channels, self.l_modes)

    def channel_amplitude(self, m: int) -> ChannelAmplitude:
        return ChannelAmplitude(self.amplitudes[m].reshape(self.l_modes, 2).copy())

    def mode_set(self) -> ModeSet:
        return ModeSet.from_pairs(self.mode_params)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.amplitudes.reshape(-1), self.mode_params.reshape(-1)])

    @classmethod
    def from_vector(cls, vec, n_channels: int, l_modes: int) -> "SystemState":
        vec = np.asarray(vec, dtype=float)
        n = state_dim(n_channels, l_modes)
        if vec.shape != (n,):
            raise ValidationError(f"expected state vector of length {n}, got {vec.shape}")
        amp = amplitude_dim(n_channels, l_modes)
        return cls(vec[:amp].reshape(n_channels, 2 * l_modes).copy(),
                   vec[amp:].reshape(l_modes, 2).copy())

    @classmethod
    def build(cls, modes: ModeSet, amplitudes, phases) -> "SystemState":
        """Assemble a state from per-channel, per-mode polar amplitudes and
        phases (each of shape ``(M, L)``)."""
        amplitudes = np.atleast_2d(np.asarray(amplitudes, dtype=float))
        phases = np.atleast_2d(np.asarray(phases, dtype=float))
        l = len(modes)
        if amplitudes.shape != phases.shape or amplitudes.shape[1] != l:
            raise ValidationError("amplitudes and phases must both be (M, L)")
        m_channels = amplitudes.shape[0]
        amp = np.empty((m_channels, 2 * l))
        for m in range(m_channels):
            for li in range(l):
                amp[m, 2 * li], amp[m, 2 * li + 1] = state_from_polar(
                    amplitudes[m, li], phases[m, li]
                )
        mp = np.column_stack([modes.omegas, modes.sigmas])
        return cls(amp, mp)


@dataclass(frozen=True)
class ReducedState:
    """Per-node state for the reduced diffusion filter: quadrature amplitudes
    of the owner's neighbors (ascending node id, self included) plus the
    shared mode block.  Dimension ``2*|N_m|*L + 2*L``."""

    owner: int
    neighbor_ids: tuple[int, ...]
    amplitudes: np.ndarray
    mode_params: np.ndarray

    def __post_init__(self):
        ids = tuple(int(j) for j in self.neighbor_ids)
        if self.owner not in ids:
            raise ValidationError("a node is always its own neighbor")
        if list(ids) != sorted(ids) or len(set(ids)) != len(ids):
            raise ValidationError("neighbor_ids must be strictly ascending")
        amps = np.asarray(self.amplitudes, dtype=float)
        mp = np.asarray(self.mode_params, dtype=float)
        if amps.shape != (len(ids), 2 * mp.shape[0]) or mp.shape[1] != 2:
            raise ValidationError("reduced amplitude layout inconsistent with neighbor count")
        object.__setattr__(self, "neighbor_ids", ids)
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "mode_params", mp)

    @property
    def l_modes(self) -> int:
        return self.mode_params.shape[0]

    @property
    def dim(self) -> int:
        return state_dim(len(self.neighbor_ids), self.l_modes)

    def block_index(self, node: int) -> int:
        """Position of ``node``'s amplitude block in the local layout."""
        try:
            return self.neighbor_ids.index(node)
        except ValueError:
            raise ValidationError(f"node {node} is not a neighbor of {self.owner}") from None

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.amplitudes.reshape(-1), self.mode_params.reshape(-1)])

    @classmethod
    def from_vector(cls, vec, owner: int, neighbor_ids, l_modes: int) -> "ReducedState":
        vec = np.asarray(vec, dtype=float)
        ids = tuple(int(j) for j in neighbor_ids)
        n = state_dim(len(ids), l_modes)
        if vec.shape != (n,):
            raise ValidationError(f"expected reduced vector of length {n}, got {vec.shape}")
        amp = amplitude_dim(len(ids), l_modes)
        return cls(owner, ids, vec[:amp].reshape(len(ids), 2 * l_modes).copy(),
                   vec[amp:].reshape(l_modes, 2).copy())


def reduce_state(state: SystemState, neighbor_ids, owner: int) -> ReducedState:
    """Restrict a full state to a node's neighborhood blocks."""
    ids = tuple(int(j) for j in neighbor_ids)
    if any(j < 0 or j >= state.n_channels for j in ids):
        raise ValidationError("neighbor id out of range")
    return ReducedState(owner, ids, state.amplitudes[list(ids)].copy(),
                        state.mode_params.copy())


@dataclass(frozen=True)
class MeasurementWindow:
    """A gap-free block of synchronized samples: ``samples`` is (M, N),
    ``fs`` the common sample rate in Hz and ``t0`` the window start time."""

    samples: np.ndarray
    fs: float
    t0: float = 0.0

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if s.ndim != 2 or s.shape[1] < 1:
            raise ValidationError("samples must be a nonempty (M, N) array")
        if not np.isfinite(s).all():
            raise ValidationError("missing or non-finite samples rejected at ingestion")
        if not (self.fs > 0.0) or not math.isfinite(self.fs):
            raise ValidationError("sample rate must be positive and finite")
        object.__setattr__(self, "samples", s)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_samples) / self.fs


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def propagate_vector(x: np.ndarray, l_modes: int, fs: float) -> np.ndarray:
    """One-step prediction on a raw state vector (full or reduced layout).

    Every quadrature pair of mode l is rotated by ``omega_l/fs`` and scaled
    by ``exp(-sigma_l/fs)``; the trailing mode block is unchanged.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    m = channels_from_dim(n, l_modes)
    amp = n - 2 * l_modes
    omegas = x[amp::2]
    sigmas = x[amp + 1::2]
    decay = np.exp(-sigmas / fs)
    c = decay * np.cos(omegas / fs)
    s = decay * np.sin(omegas / fs)
    pairs = x[:amp].reshape(m, l_modes, 2)
    out = x.copy()
    res = out[:amp].reshape(m, l_modes, 2)
    xc = pairs[..., 0]
    xs = pairs[..., 1]
    res[..., 0] = xc * c - xs * s
    res[..., 1] = xc * s + xs * c
    return out


def jacobian_matrix(x: np.ndarray, l_modes: int, fs: float) -> np.ndarray:
    """Analytic Jacobian of :func:`propagate_vector` at ``x``.

    Amplitude rows carry the 2x2 rotation-decay block plus the cross
    derivatives with respect to ``(omega_l, sigma_l)``; mode rows are
    identity because frequencies and dampings are constant in the model.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    m = channels_from_dim(n, l_modes)
    amp = n - 2 * l_modes
    omegas = x[amp::2]
    sigmas = x[amp + 1::2]
    decay = np.exp(-sigmas / fs)
    c = decay * np.cos(omegas / fs)
    s = decay * np.sin(omegas / fs)
    f = np.eye(n)
    xnext = propagate_vector(x, l_modes, fs)
    for mi in range(m):
        for li in range(l_modes):
            i = mi * 2 * l_modes + 2 * li
            f[i, i] = c[li]
            f[i, i + 1] = -s[li]
            f[i + 1, i] = s[li]
            f[i + 1, i + 1] = c[li]
            wcol = amp + 2 * li
            # d(xc')/domega = -xs'/fs, d(xs')/domega = xc'/fs
            f[i, wcol] = -xnext[i + 1] / fs
            f[i + 1, wcol] = xnext[i] / fs
            # d(xc')/dsigma = -xc'/fs, d(xs')/dsigma = -xs'/fs
            f[i, wcol + 1] = -xnext[i] / fs
            f[i + 1, wcol + 1] = -xnext[i + 1] / fs
    return f


def propagate(state: SystemState | ReducedState, fs: float):
    """Typed wrapper around :func:`propagate_vector`."""
    if not (fs > 0.0):
        raise ValidationError("fs must be positive")
    vec = propagate_vector(state.to_vector(), state.l_modes, fs)
    if isinstance(state, ReducedState):
        return ReducedState.from_vector(vec, state.owner, state.neighbor_ids, state.l_modes)
    return SystemState.from_vector(vec, state.n_channels, state.l_modes)


def jacobian(state: SystemState | ReducedState, fs: float) -> np.ndarray:
    """Typed wrapper around :func:`jacobian_matrix`."""
    if not (fs > 0.0):
        raise ValidationError("fs must be positive")
    return jacobian_matrix(state.to_vector(), state.l_modes, fs)


# ---------------------------------------------------------------------------
# Observation
# ---------------------------------------------------------------------------

def observation_matrix(m_channels: int, l_modes: int) -> np.ndarray:
    """Centralized observation matrix, shape ``(M, 2ML + 2L)``.

    Row m carries ones over channel m's full 2L amplitude block; the mode
    columns are never observed directly.
    """
    if m_channels < 1 or l_modes < 1:
        raise ValidationError("m_channels and l_modes must be >= 1")
    h = np.zeros((m_channels, state_dim(m_channels, l_modes)))
    for m in range(m_channels):
        h[m, m * 2 * l_modes:(m + 1) * 2 * l_modes] = 1.0
    return h


def reduced_observation_matrix(neighbor_ids, l_modes: int) -> np.ndarray:
    """Per-node observation matrix over a reduced layout, shape
    ``(|N_m|, 2|N_m|L + 2L)``.  Row i covers the local block of the ith
    neighbor in ascending-id order."""
    ids = list(neighbor_ids)
    if not ids:
        raise ValidationError("neighbor list must be nonempty")
    if ids != sorted(ids):
        raise ValidationError("neighbor list must be sorted ascending")
    if l_modes < 1:
        raise ValidationError("l_modes must be >= 1")
    k = len(ids)
    h = np.zeros((k, state_dim(k, l_modes)))
    for i in range(k):
        h[i, i * 2 * l_modes:(i + 1) * 2 * l_modes] = 1.0
    return h


def observe(state, h_matrix: np.ndarray) -> np.ndarray:
    """Predicted measurement vector ``H @ x`` with dimension checking."""
    vec = state.to_vector() if hasattr(state, "to_vector") else np.asarray(state, dtype=float)
    h = np.asarray(h_matrix, dtype=float)
    if h.ndim != 2 or h.shape[1] != vec.size:
        raise ValidationError(
            f"observation matrix {h.shape} incompatible with state of length {vec.size}"
        )
    return h @ vec


def fitted_curve(state: SystemState | ReducedState, fs: float, n_samples: int) -> np.ndarray:
    """Noiseless per-channel trajectory implied by a state: propagate
    ``n_samples`` steps and observe with the block-sum convention.

    Returns an ``(M, n_samples)`` array (``|N_m|`` rows for reduced states).
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    if not (fs > 0.0):
        raise ValidationError("fs must be positive")
    l = state.l_modes
    x = state.to_vector()
    m = channels_from_dim(x.size, l)
    amp = x.size - 2 * l
    out = np.empty((m, n_samples))
    for k in range(n_samples):
        out[:, k] = x[:amp].reshape(m, 2 * l).sum(axis=1)
        x = propagate_vector(x, l, fs)
    return out


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

def synthesize_window(
    modes: ModeSet,
    per_channel,
    fs: float,
    n_samples: int,
    snr_db: float | None = None,
    noise_std=None,
    rng: np.random.Generator | None = None,
    t0: float = 0.0,
) -> tuple[MeasurementWindow, SystemState]:
    """Generate a multi-channel ringdown window together with its exact
    ground-truth state.

    Parameters
    ----------
    modes : ModeSet
        Shared (omega, sigma) pairs.
    per_channel : sequence of (scale, phases)
        One entry per channel: a positive scalar multiplier and a length-L
        phase sequence.  Channel c's sample k is
        ``scale_c * (sum_l exp(-sigma_l k/fs) cos(omega_l k/fs + phi_lc) + eps_c[k])``.
    snr_db, noise_std : optional
        Either a target SNR in dB (noise std chosen per channel so that the
        requested ratio holds for the noiseless bracketed sum) or an explicit
        inner-bracket noise std (scalar or per channel).  Omit both for a
        noiseless window.

    Returns
    -------
    (MeasurementWindow, SystemState)
        The ground-truth state reproduces the noiseless samples exactly via
        :func:`fitted_curve`.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    if not (fs > 0.0) or not math.isfinite(fs):
        raise ValidationError("fs must be positive and finite")
    if snr_db is not None and noise_std is not None:
        raise ValidationError("give either snr_db or noise_std, not both")

    scales = []
    phases = []
    for entry in per_channel:
        scale, phi = entry
        phi = np.asarray(phi, dtype=float).reshape(-1)
        if phi.size != len(modes):
            raise ValidationError(f"expected {len(modes)} phases per channel, got {phi.size}")
        if not np.isfinite(phi).all() or not math.isfinite(scale):
            raise ValidationError("non-finite channel parameters")
        if scale <= 0:
            raise ValidationError("channel scales must be positive")
        scales.append(float(scale))
        phases.append(phi)
    if not scales:
        raise ValidationError("at least one channel required")

    m_channels = len(scales)
    t = np.arange(n_samples) / fs
    omegas = modes.omegas
    sigmas = modes.sigmas
    clean = np.zeros((m_channels, n_samples))
    for c in range(m_channels):
        for li in range(len(modes)):
            clean[c] += np.exp(-sigmas[li] * t) * np.cos(omegas[li] * t + phases[c][li])

    if snr_db is not None:
        power = np.mean(clean ** 2, axis=1)
        stds = np.sqrt(power / (10.0 ** (snr_db / 10.0)))
    elif noise_std is not None:
        stds = np.broadcast_to(np.asarray(noise_std, dtype=float), (m_channels,)).copy()
        if (stds < 0).any():
            raise ValidationError("noise std must be nonnegative")
    else:
        stds = np.zeros(m_channels)

    noisy = clean.copy()
    if (stds > 0).any():
        if rng is None:
            rng = np.random.default_rng()
        noisy = clean + stds[:, None] * rng.standard_normal(clean.shape)

    samples = np.asarray(scales)[:, None] * noisy
    window = MeasurementWindow(samples, fs, t0)
    truth = SystemState.build(
        modes,
        np.tile(np.asarray(scales)[:, None], (1, len(modes))),
        np.vstack(phases),
    )
    return window, truth
