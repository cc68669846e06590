"""Meridionally truncated stochastic skeleton model on a periodic equatorial belt.

Prognostic fields on the zonal grid: Kelvin-wave amplitude K, Rossby-wave
amplitude R, moisture anomaly Q, and convective-activity anomaly A (total
activity is A + a_bar, which must stay positive).  One nondimensional time
unit corresponds to two months.

Time stepping splits each step into (i) exact spectral advection of K
(speed +1) and R (speed -1/3), (ii) an explicit Euler update of the heating
and moisture couplings, and (iii) Euler-Maruyama for the stochastic
convective-activity equation with an absorbing floor on A + a_bar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Absorbing floor for total convective activity after each step.
A_TOTAL_FLOOR = 1e-6

# Zonal wavenumber indices retained by the intraseasonal-mode diagnostic
# (planetary scales).
MJO_WAVENUMBERS = (1, 2, 3)


def anomaly_floor(total_floor: float, a_bar: float) -> float:
    """Smallest anomaly value whose total activity provably reaches the floor.

    total_floor - a_bar can round so that adding a_bar back falls short of the
    floor; nudge upward until the clamped total satisfies the bound exactly.
    """
    b = total_floor - a_bar
    while b + a_bar < total_floor:
        b = np.nextafter(b, np.inf)
    return b


class IntegrationFailure(RuntimeError):
    """A time step produced a non-finite field value."""


class EnergyDomainError(ValueError):
    """Energy evaluation requested for a state with A + a_bar <= 0."""


@dataclass(frozen=True)
class ModelParams:
    """Physical and numerical parameters of the truncated model.

    s_theta and s_q are per-grid-point heating/moistening source vectors;
    the spatially homogeneous configuration uses s_theta = s_q = a_bar * h_bar.
    """

    gamma: float
    q_tilde: float
    h_bar: float
    a_bar: float
    s_theta: np.ndarray
    s_q: np.ndarray
    domain_length: float
    n_grid: int
    dt: float

    def __post_init__(self):
        if not 0.0 < self.q_tilde < 1.0:
            raise ValueError(f"q_tilde must lie in (0, 1), got {self.q_tilde}")
        # gamma == 0 is the linear test regime (waves decouple from convection).
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.a_bar <= 0.0:
            raise ValueError(f"a_bar must be > 0, got {self.a_bar}")
        if self.n_grid < 4 or self.n_grid % 2 != 0:
            raise ValueError(f"n_grid must be even and >= 4, got {self.n_grid}")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.domain_length <= 0.0:
            raise ValueError(f"domain_length must be > 0, got {self.domain_length}")
        for name in ("s_theta", "s_q"):
            vec = np.asarray(getattr(self, name), dtype=float)
            if vec.shape != (self.n_grid,):
                raise ValueError(f"{name} must have length n_grid={self.n_grid}")
            object.__setattr__(self, name, vec)

    @property
    def dx(self) -> float:
        return self.domain_length / self.n_grid

    def grid(self) -> np.ndarray:
        """Grid points x_j = j * dx, j = 0 .. n_grid-1."""
        return np.arange(self.n_grid) * self.dx

    @property
    def s_mean(self) -> float:
        """Grid-mean heating source, the S entering the energy diagnostics."""
        return float(np.mean(self.s_theta))


def homogeneous_sources(n_grid: int, a_bar: float = 0.1, h_bar: float = 0.22):
    """Balanced spatially uniform sources s_theta = s_q = a_bar * h_bar."""
    s = np.full(n_grid, a_bar * h_bar)
    return s, s.copy()


def warm_pool_sources(n_grid: int, domain_length: float):
    """Warm-pool heating/moistening profile 0.022 * (1 - 0.6 cos(2 pi x / L))."""
    x = np.arange(n_grid) * (domain_length / n_grid)
    s = 0.022 * (1.0 - 0.6 * np.cos(2.0 * np.pi * x / domain_length))
    return s, s.copy()


def default_params(
    forcing: str = "homogeneous",
    n_grid: int = 64,
    dt: float = 1e-3,
    gamma: float = 1.66,
    q_tilde: float = 0.9,
    h_bar: float = 0.22,
    a_bar: float = 0.1,
    domain_length: float = 8.0 / 3.0,
) -> ModelParams:
    """Parameters with the standard configuration values and a forcing mode."""
    if forcing == "homogeneous":
        s_theta, s_q = homogeneous_sources(n_grid, a_bar, h_bar)
    elif forcing in ("warm_pool", "warm-pool"):
        s_theta, s_q = warm_pool_sources(n_grid, domain_length)
    else:
        raise ValueError(f"unknown forcing mode {forcing!r}")
    return ModelParams(
        gamma=gamma,
        q_tilde=q_tilde,
        h_bar=h_bar,
        a_bar=a_bar,
        s_theta=s_theta,
        s_q=s_q,
        domain_length=domain_length,
        n_grid=n_grid,
        dt=dt,
    )


@dataclass
class ModelState:
    """The four prognostic fields at one time."""

    k_field: np.ndarray
    r_field: np.ndarray
    q_field: np.ndarray
    a_field: np.ndarray
    time: float = 0.0

    def copy(self) -> "ModelState":
        return ModelState(
            self.k_field.copy(),
            self.r_field.copy(),
            self.q_field.copy(),
            self.a_field.copy(),
            self.time,
        )

    def stacked(self) -> np.ndarray:
        """State vector with (K, R, Q, A) blocks, length 4 * n_grid."""
        return np.concatenate([self.k_field, self.r_field, self.q_field, self.a_field])


def rest_state(params: ModelParams, time: float = 0.0) -> ModelState:
    z = np.zeros(params.n_grid)
    return ModelState(z.copy(), z.copy(), z.copy(), z.copy(), time)


def state_from_vector(vec: np.ndarray, n_grid: int, time: float = 0.0) -> ModelState:
    """Inverse of ModelState.stacked()."""
    v = np.asarray(vec, dtype=float)
    if v.shape != (4 * n_grid,):
        raise ValueError(f"expected length {4 * n_grid}, got {v.shape}")
    return ModelState(
        v[:n_grid].copy(),
        v[n_grid : 2 * n_grid].copy(),
        v[2 * n_grid : 3 * n_grid].copy(),
        v[3 * n_grid :].copy(),
        time,
    )


@dataclass(frozen=True)
class EnergyDiagnostic:
    pointwise: np.ndarray
    grid_mean: float


def _wavenumbers(params: ModelParams) -> np.ndarray:
    # Angular wavenumbers 2 pi m / L for the rfft layout.
    return 2.0 * np.pi * np.fft.rfftfreq(params.n_grid, d=params.dx)


def _advect(field: np.ndarray, speed: float, dt: float, wavenumbers: np.ndarray) -> np.ndarray:
    """Exact solution of f_t + speed * f_x = 0 over dt (spectral phase shift)."""
    spec = np.fft.rfft(field)
    spec *= np.exp(-1j * wavenumbers * speed * dt)
    return np.fft.irfft(spec, n=field.size)


def _ddx(field: np.ndarray, wavenumbers: np.ndarray) -> np.ndarray:
    spec = 1j * wavenumbers * np.fft.rfft(field)
    if field.size % 2 == 0:
        spec[-1] = 0.0  # Nyquist mode has no well-defined first derivative
    return np.fft.irfft(spec, n=field.size)


def step(state: ModelState, params: ModelParams, noise: np.ndarray) -> ModelState:
    """Advance the state by one time step dt.

    noise must be an i.i.d. standard-normal vector of length n_grid; pass
    zeros for a deterministic step.  Raises IntegrationFailure if any field
    becomes non-finite.
    """
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (params.n_grid,):
        raise ValueError(f"noise must have length n_grid={params.n_grid}")
    dt = params.dt
    kw = _wavenumbers(params)

    # (i) exact advection: K eastward at speed 1, R westward at speed 1/3
    k = _advect(state.k_field, 1.0, dt, kw)
    r = _advect(state.r_field, -1.0 / 3.0, dt, kw)
    q = state.q_field.copy()
    a = state.a_field.copy()

    # (ii) explicit Euler for the heating/moisture couplings; the heating
    # terms involve the total convective activity a + a_bar so that the
    # rest state with balanced sources s = a_bar * h_bar is an equilibrium
    a_total = a + params.a_bar
    heat = params.s_theta - params.h_bar * a_total
    k = k + dt * 0.5 * heat
    r = r + dt * heat / 3.0
    moist = (params.q_tilde / 6.0 - 1.0) * (params.h_bar * a_total - params.s_q)
    q = q + dt * (-params.q_tilde * (_ddx(k, kw) - _ddx(r, kw) / 3.0) + moist)

    # (iii) Euler-Maruyama for the convective-activity SDE, then absorb at
    # the positivity floor
    drift = params.gamma * a_total * q
    with np.errstate(invalid="ignore"):
        # a nonpositive total activity (a violated precondition) yields NaN
        # here and is reported by the finiteness check below
        diffusion = np.sqrt(params.gamma * np.abs(q) * a_total)
    a = a + dt * drift + np.sqrt(dt) * diffusion * noise
    a = np.maximum(a, anomaly_floor(A_TOTAL_FLOOR, params.a_bar))

    for name, field in (("K", k), ("R", r), ("Q", q), ("A", a)):
        finite = np.isfinite(field)
        if not finite.all():
            j = int(np.argmin(finite))
            raise IntegrationFailure(
                f"non-finite {name} field at grid index {j} after step to "
                f"t={state.time + dt:.6f}"
            )

    return ModelState(k, r, q, a, state.time + dt)


def _energy_pointwise(
    k: np.ndarray,
    r: np.ndarray,
    q: np.ndarray,
    a: np.ndarray,
    params: ModelParams,
    r_sq_coeff: float,
    conv_linear_coeff: float,
) -> np.ndarray:
    a_total = a + params.a_bar
    if np.any(a_total <= 0.0):
        j = int(np.argmax(a_total <= 0.0))
        raise EnergyDomainError(
            f"A + a_bar must be positive for the energy log term; "
            f"violated at grid index {j} (value {a_total[j]:.3e})"
        )
    qt = params.q_tilde
    moist = q / qt - k - r
    conv = (conv_linear_coeff * a_total - params.s_mean * np.log(a_total)) / (
        params.gamma * qt
    )
    return k**2 + r_sq_coeff * r**2 + 0.5 * qt / (1.0 - qt) * moist**2 + conv


def total_energy(state: ModelState, params: ModelParams) -> EnergyDiagnostic:
    """Band energy diagnostic used by the constraint machinery.

    pointwise = K^2 + (3/8) R^2 + (1/2) Qt/(1-Qt) (Q/Qt - K - R)^2
                + S/(Gamma Qt) ((A + a_bar) - log(A + a_bar))
    with S the grid-mean heating source.  grid_mean is the average over the
    grid, the quantity the feasibility band [energy_min, energy_max] applies to.
    """
    pw = _energy_pointwise(
        state.k_field,
        state.r_field,
        state.q_field,
        state.a_field,
        params,
        r_sq_coeff=3.0 / 8.0,
        conv_linear_coeff=params.s_mean,
    )
    return EnergyDiagnostic(pointwise=pw, grid_mean=float(np.mean(pw)))


def conserved_energy(state: ModelState, params: ModelParams) -> EnergyDiagnostic:
    """Exact invariant of the deterministic dynamics with balanced uniform sources.

    Differs from total_energy in the Rossby weight (3/2 instead of 3/8) and in
    the linear convective coefficient (h_bar instead of the source mean); these
    are the unique choices that make d/dt of the grid mean vanish identically
    under the noise-free equations, so this functional is the one whose drift
    measures integrator error.
    """
    pw = _energy_pointwise(
        state.k_field,
        state.r_field,
        state.q_field,
        state.a_field,
        params,
        r_sq_coeff=3.0 / 2.0,
        conv_linear_coeff=params.h_bar,
    )
    return EnergyDiagnostic(pointwise=pw, grid_mean=float(np.mean(pw)))


def grid_mean_energy(vec: np.ndarray, params: ModelParams) -> float:
    """Grid-mean band energy of a stacked (K, R, Q, A) state vector."""
    n = params.n_grid
    pw = _energy_pointwise(
        vec[:n],
        vec[n : 2 * n],
        vec[2 * n : 3 * n],
        vec[3 * n :],
        params,
        r_sq_coeff=3.0 / 8.0,
        conv_linear_coeff=params.s_mean,
    )
    return float(np.mean(pw))


def grid_mean_energy_gradient(vec: np.ndarray, params: ModelParams) -> np.ndarray:
    """Analytic gradient of grid_mean_energy with respect to the stacked vector."""
    n = params.n_grid
    k = vec[:n]
    r = vec[n : 2 * n]
    q = vec[2 * n : 3 * n]
    a = vec[3 * n :]
    a_total = a + params.a_bar
    if np.any(a_total <= 0.0):
        j = int(np.argmax(a_total <= 0.0))
        raise EnergyDomainError(
            f"A + a_bar must be positive for the energy gradient; "
            f"violated at grid index {j}"
        )
    qt = params.q_tilde
    moist = q / qt - k - r
    w = qt / (1.0 - qt)
    gk = 2.0 * k - w * moist
    gr = 2.0 * (3.0 / 8.0) * r - w * moist
    gq = w * moist / qt
    ga = params.s_mean / (params.gamma * qt) * (1.0 - 1.0 / a_total)
    return np.concatenate([gk, gr, gq, ga]) / n


def linearized_system_matrix(m: int, params: ModelParams) -> np.ndarray:
    """4x4 complex matrix of the noise-free, source-free dynamics linearized
    about the rest state, for spectral coefficients at zonal wavenumber m."""
    kx = 2.0 * np.pi * m / params.domain_length
    hb = params.h_bar
    qt = params.q_tilde
    return np.array(
        [
            [-1j * kx, 0.0, 0.0, -hb / 2.0],
            [0.0, 1j * kx / 3.0, 0.0, -hb / 3.0],
            [-1j * kx * qt, 1j * kx * qt / 3.0, 0.0, (qt / 6.0 - 1.0) * hb],
            [0.0, 0.0, params.gamma * params.a_bar, 0.0],
        ],
        dtype=complex,
    )


def intraseasonal_mode(m: int, params: ModelParams):
    """Right and left eigenvectors of the slow eastward mode at wavenumber m.

    Returns (right, left) with left @ right == 1 and the phase fixed so the
    Kelvin component of the right eigenvector is real and non-negative.
    Selection: among the four linear modes, the eastward-propagating one with
    the lowest frequency.
    """
    mat = linearized_system_matrix(m, params)
    eigvals, eigvecs = np.linalg.eig(mat)
    freqs = -eigvals.imag  # modes evolve as exp(lambda t) = exp(-i omega t)
    eastward = np.where(freqs > 1e-12)[0]
    if eastward.size == 0:
        raise RuntimeError(f"no eastward linear mode found at wavenumber {m}")
    idx = eastward[np.argmin(freqs[eastward])]
    right = eigvecs[:, idx]
    phase = right[0]
    if abs(phase) > 1e-12:
        right = right * (abs(phase) / phase)
    right = right / np.linalg.norm(right)
    basis = eigvecs.copy()
    basis[:, idx] = right
    left = np.linalg.inv(basis)[idx, :]
    return right, left


def _spectral_coeffs(state: ModelState, m: int) -> np.ndarray:
    n = state.k_field.size
    out = np.empty(4, dtype=complex)
    for i, f in enumerate((state.k_field, state.r_field, state.q_field, state.a_field)):
        out[i] = np.fft.rfft(f)[m] / n
    return out


def mjo_project(state: ModelState, params: ModelParams) -> dict[int, complex]:
    """Complex amplitude of the intraseasonal mode at each retained wavenumber."""
    amps: dict[int, complex] = {}
    for m in MJO_WAVENUMBERS:
        _, left = intraseasonal_mode(m, params)
        amps[m] = complex(left @ _spectral_coeffs(state, m))
    return amps


def mjo_reconstruct(
    amps: dict[int, complex], params: ModelParams, time: float = 0.0
) -> ModelState:
    """Four-field state containing only the projected intraseasonal modes."""
    n = params.n_grid
    x = params.grid()
    fields = np.zeros((4, n))
    for m, amp in amps.items():
        right, _ = intraseasonal_mode(m, params)
        phase = np.exp(1j * 2.0 * np.pi * m * x / params.domain_length)
        for c in range(4):
            fields[c] += 2.0 * np.real(amp * right[c] * phase)
    return ModelState(fields[0], fields[1], fields[2], fields[3], time)


def mjo_diagnostic(state: ModelState, params: ModelParams) -> np.ndarray:
    """Scalar intraseasonal-mode amplitude field.

    Projects the state onto the slow eastward eigenmode of the linearized
    system at the retained planetary wavenumbers and returns the real
    amplitude field sum_m 2 Re[alpha_m exp(i k_m x)].
    """
    x = params.grid()
    out = np.zeros(params.n_grid)
    for m, amp in mjo_project(state, params).items():
        out += 2.0 * np.real(amp * np.exp(1j * 2.0 * np.pi * m * x / params.domain_length))
    return out
