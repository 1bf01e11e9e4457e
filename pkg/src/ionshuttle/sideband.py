"""Blue-sideband flop modelling and phonon-population fitting.

Models the spin population during a blue-sideband pulse driven on a
|down, n> <-> |up, n+1> transition for thermal and displaced-thermal
phonon distributions, and fits measured flops to extract the thermal
occupation and coherent amplitude.
"""

from __future__ import annotations

import pathlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

N_MAX = 20          # outer truncation of the flop sum
N_MAX_INNER = 40    # inner truncation of the displaced-thermal sum
GAMMA_EXPONENT = 0.7  # decay-rate scaling gamma_n = gamma0 * (n+1)^0.7


class FitError(RuntimeError):
    """Sideband fit failed (non-convergence or degenerate Jacobian)."""


# ---- distribution and flop model --------------------------------------------

def laguerre_gen(n: int, x: float) -> float:
    """Generalized Laguerre polynomial L_n^(1)(x) by three-term recurrence.

    Stable for n <= 200; raises for negative n.
    """
    n = int(n)
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n > 200:
        raise ValueError("recurrence unreliable beyond n = 200")
    lm, lc = 1.0, 2.0 - x       # L_0^1, L_1^1
    if n == 0:
        return lm
    for k in range(1, n):
        lm, lc = lc, ((2.0 * k + 2.0 - x) * lc - (k + 1.0) * lm) / (k + 1.0)
    return lc


def rabi_bsb(n: int, eta: float, omega: float) -> float:
    """Blue-sideband Rabi frequency Omega_{n,n+1}.

    Omega * exp(-eta^2/2) * sqrt(1/(n+1)) * eta * L_n^1(eta^2).
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if omega <= 0:
        raise ValueError("omega must be positive")
    return (omega * np.exp(-0.5 * eta ** 2) * np.sqrt(1.0 / (n + 1))
            * eta * laguerre_gen(n, eta ** 2))


def pn_thermal(n_bar: float, n) -> np.ndarray:
    """Thermal occupation probability n_bar^n / (n_bar+1)^(n+1)."""
    if n_bar < 0:
        raise ValueError("n_bar must be nonnegative")
    n = np.asarray(n)
    if n_bar == 0:
        return np.where(n == 0, 1.0, 0.0)
    # log domain keeps large n well-behaved
    return np.exp(n * np.log(n_bar) - (n + 1) * np.log(n_bar + 1.0))


def _pn_displaced_table(n_bar: float, alpha_mag2: float, n_out: int,
                        n_inner: int) -> np.ndarray:
    """p(n) for n = 0..n_out of a displaced thermal state.

    Vectorized double sum over the thermal occupation m and interference
    index l, evaluated with log-factorials.
    """
    a = float(alpha_mag2)
    if a == 0.0:
        return pn_thermal(n_bar, np.arange(n_out + 1))
    ns = np.arange(n_out + 1)[:, None, None]
    ms = np.arange(n_inner + 1)[None, :, None]
    ls = np.arange(min(n_out, n_inner) + 1)[None, None, :]
    # term (-1)^l a^((n+m)/2 - l) / (l! (m-l)! (n-l)!), zero outside l <= min(m,n)
    valid = (ls <= ms) & (ls <= ns)
    e = 0.5 * (ns + ms) - ls
    with np.errstate(invalid="ignore"):
        log_mag = (e * np.log(a) - gammaln(ls + 1.0)
                   - gammaln(np.where(valid, ms - ls, 0) + 1.0)
                   - gammaln(np.where(valid, ns - ls, 0) + 1.0))
    log_mag = np.where(valid, log_mag, -np.inf)
    # The alternating inner sum and the m!/n! prefactor both overflow well
    # inside the useful (n, m) range, so scale the sum by its largest term
    # and recombine everything in the log domain.
    peak = np.max(log_mag, axis=2, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    mag = np.exp(log_mag - peak)
    inner = np.sum(np.where(ls % 2 == 0, mag, -mag), axis=2)
    with np.errstate(divide="ignore"):
        log_inner2 = 2.0 * (np.log(np.abs(inner)) + peak[:, :, 0])
    n_arr = np.arange(n_inner + 1)
    log_pth = np.where(
        n_bar > 0,
        n_arr * np.log(max(n_bar, 1e-300)) - (n_arr + 1) * np.log(n_bar + 1.0),
        np.where(n_arr == 0, 0.0, -np.inf))[None, :]
    log_term = (log_pth - a + gammaln(ms[:, :, 0] + 1.0)
                + gammaln(ns[:, 0, :] + 1.0) + log_inner2)
    return np.sum(np.exp(log_term), axis=1)


def pn_displaced_thermal(n_bar: float, alpha_mag2: float, n: int,
                         n_max: int = N_MAX_INNER) -> float:
    """Displaced-thermal occupation probability of Fock state n.

    Double sum over the thermal occupation m and the interference index l,
    evaluated with log-factorials. Reduces to pn_thermal at alpha_mag2 = 0
    and to a Poisson distribution at n_bar = 0.
    """
    if n_bar < 0 or alpha_mag2 < 0:
        raise ValueError("n_bar and alpha_mag2 must be nonnegative")
    if n < 0:
        raise ValueError("n must be nonnegative")
    return float(_pn_displaced_table(n_bar, alpha_mag2, n, n_max)[n])


def flop_model(t, n_thermal: float, coherent_mag2: float, rabi: float,
               decay: float, eta: float, kind: str = "thermal",
               n_max: int = N_MAX,
               gamma_exponent: float = GAMMA_EXPONENT) -> np.ndarray:
    """Spin population P(down, t) during a blue-sideband pulse.

    P = 1/2 sum_n p(n) (1 + exp(-gamma_n t) cos(Omega_{n,n+1} t)) with
    gamma_n = decay * (n+1)^gamma_exponent. kind selects the phonon
    distribution: "thermal" or "displaced".
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("pulse times must be nonnegative")
    if kind == "thermal":
        pn = pn_thermal(n_thermal, np.arange(n_max + 1))
    elif kind == "displaced":
        pn = _pn_displaced_table(n_thermal, coherent_mag2, n_max, N_MAX_INNER)
    else:
        raise ValueError(f"unknown distribution kind {kind!r}")
    out = np.zeros_like(t, dtype=float)
    for n in range(n_max + 1):
        om = rabi_bsb(n, eta, rabi)
        gam = decay * (n + 1.0) ** gamma_exponent
        out += pn[n] * (1.0 + np.exp(-gam * t) * np.cos(om * t))
    return 0.5 * out


# ---- datasets and fitting ---------------------------------------------------

@dataclass
class FlopDataset:
    """Blue-sideband flop measurement.

    pulse_times in seconds, populations P(down) in [0, 1], shots per
    point, and the Lamb-Dicke parameter of the driven transition. flipped
    marks datasets recorded with the inverted spin convention (P falls
    from ~0 instead of rising from ~1).
    """

    pulse_times: np.ndarray
    populations: np.ndarray
    shots: np.ndarray
    lamb_dicke: float
    flipped: bool = False

    def __post_init__(self):
        self.pulse_times = np.asarray(self.pulse_times, dtype=float)
        self.populations = np.asarray(self.populations, dtype=float)
        self.shots = np.asarray(self.shots)
        if not (self.pulse_times.shape == self.populations.shape
                == self.shots.shape) or self.pulse_times.ndim != 1:
            raise ValueError("pulse_times, populations and shots must be "
                             "matching 1-d arrays")
        if np.any(self.pulse_times < 0):
            raise ValueError("pulse times must be nonnegative")
        if np.any((self.populations < 0) | (self.populations > 1)):
            raise ValueError("populations must lie in [0, 1]")
        if np.any(self.shots < 1):
            raise ValueError("shots must be >= 1")
        if self.lamb_dicke <= 0:
            raise ValueError("lamb_dicke must be positive")

    @property
    def n_points(self) -> int:
        return len(self.pulse_times)

    def save(self, path):
        header = (f"eta = {self.lamb_dicke!r}\n"
                  f"flipped = {int(self.flipped)}\n"
                  "time_us,p_down,shots")
        rows = np.column_stack([self.pulse_times * 1e6, self.populations,
                                self.shots])
        np.savetxt(path, rows, delimiter=",", header=header,
                   fmt=["%.9g", "%.9g", "%d"])

    @classmethod
    def load(cls, path):
        eta, flipped = None, False
        with open(path) as fh:
            for line in fh:
                if not line.startswith("#"):
                    break
                body = line[1:].strip()
                if body.startswith("eta"):
                    eta = float(body.split("=", 1)[1])
                elif body.startswith("flipped"):
                    flipped = bool(int(body.split("=", 1)[1]))
        if eta is None:
            raise ValueError(f"{path}: header does not declare eta")
        rows = np.loadtxt(path, delimiter=",")
        rows = np.atleast_2d(rows)
        return cls(rows[:, 0] * 1e-6, rows[:, 1], rows[:, 2].astype(int),
                   eta, flipped)


@dataclass
class FitResult:
    """Fitted flop parameters.

    n_thermal is the thermal mean occupation, coherent_mag2 the coherent
    |alpha|^2 (zero for thermal fits), rabi the bare Rabi frequency in
    rad/s, decay the base decay rate gamma0 in 1/s. covariance is the
    4x4 matrix over (n_thermal, coherent_mag2, rabi, decay); residual is
    the final weighted sum of squares.
    """

    n_thermal: float
    coherent_mag2: float
    rabi: float
    decay: float
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((4, 4)))
    residual: float = 0.0
    kind: str = "thermal"
    n_iterations: int = 0

    @property
    def sigma_n_thermal(self) -> float:
        return float(np.sqrt(max(self.covariance[0, 0], 0.0)))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    y = np.asarray(y, dtype=float)
    with np.errstate(over="ignore"):
        return np.where(y > 30.0, y, np.log(np.expm1(np.maximum(y, 1e-300))))


def _default_guesses(ds: FlopDataset, kind: str):
    """Candidate starting points bracketing the flop-rate ambiguity.

    The first minimum of a thermal flop arrives earlier than half the
    bare n = 0 period (collapse of the dephasing n-components), so the
    rate inferred from it is scanned over a bracket of scale factors.
    """
    p = 1.0 - ds.populations if ds.flipped else ds.populations
    t = ds.pulse_times
    dts = np.diff(np.sort(t))
    om01 = None
    if len(t) >= 8 and dts.min() > 0 and dts.max() < 1.5 * dts.min():
        # near-uniform sampling: dominant line of the periodogram
        order = np.argsort(t)
        spec = np.abs(np.fft.rfft(p[order] - p.mean()))
        k = int(np.argmax(spec[1:])) + 1
        om01 = 2.0 * np.pi * k / (t.max() - t.min())
    if om01 is None or om01 <= 0:
        k = int(np.argmin(p))
        t_min = t[k] if t[k] > 0 else t[-1]
        om01 = np.pi / t_min
    eta = ds.lamb_dicke
    rabi = om01 / (eta * np.exp(-0.5 * eta ** 2))
    decay = 0.05 / ds.pulse_times[-1]
    a2s = (0.3, 1.0) if kind == "displaced" else (0.0,)
    return [np.array([n_th, a2, rabi * s, decay])
            for s in (1.0, 0.8, 0.65, 0.5, 1.25, 1.6, 2.0)
            for n_th in (0.3, 1.5)
            for a2 in a2s]


def fit_flop(dataset: FlopDataset, kind: str = "thermal",
             initial_guess=None, n_max: int = N_MAX,
             gamma_exponent: float = GAMMA_EXPONENT,
             max_iter: int = 500, step_tol: float = 1e-8) -> FitResult:
    """Weighted nonlinear least-squares fit of a sideband flop.

    Damped Gauss-Newton on softplus-reparameterized (hence nonnegative)
    parameters; weights follow binomial shot noise with a sigma floor of
    1e-3; the covariance comes from the final weighted Jacobian. Needs at
    least 8 points spanning half a flop period.
    """
    if kind not in ("thermal", "displaced"):
        raise ValueError(f"unknown distribution kind {kind!r}")
    if dataset.n_points < 8:
        raise FitError("need at least 8 data points")
    p_obs = dataset.populations
    if dataset.flipped:
        p_obs = 1.0 - p_obs
    if p_obs.min() > 0.65:
        raise FitError("data span less than half a flop period "
                       "(no minimum reached)")
    t = dataset.pulse_times
    eta = dataset.lamb_dicke
    sigma = np.sqrt(np.clip(p_obs * (1.0 - p_obs), 0.0, None)
                    / dataset.shots)
    sigma = np.maximum(sigma, 1e-3)
    w = 1.0 / sigma

    free = [0, 2, 3] if kind == "thermal" else [0, 1, 2, 3]

    def model_of(theta):
        return flop_model(t, theta[0], theta[1], theta[2], theta[3], eta,
                          kind=kind, n_max=n_max,
                          gamma_exponent=gamma_exponent)

    def gauss_newton(theta0):
        base = theta0.copy()

        def unpack(phi):
            th = base.copy()
            # clip keeps softplus strictly positive under float underflow
            th[free] = _softplus(np.clip(phi, -30.0, None))
            return th

        def residuals(phi):
            return w * (model_of(unpack(phi)) - p_obs)

        phi = _softplus_inv(base[free])
        lam = 1e-3
        for it in range(max_iter):
            r = residuals(phi)
            J = np.empty((len(t), len(free)))
            for j in range(len(free)):
                h = 1e-6 * max(abs(phi[j]), 1.0)
                phj = phi.copy()
                phj[j] += h
                J[:, j] = (residuals(phj) - r) / h
            JtJ = J.T @ J
            g = J.T @ r
            if np.sqrt(g @ g) < 1e-30:      # already at a stationary point
                return unpack(phi), float(r @ r), it + 1
            for _ in range(60):
                try:
                    step = np.linalg.solve(
                        JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-30)),
                        -g)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                r_new = residuals(phi + step)
                if r_new @ r_new < r @ r:
                    break
                lam *= 10.0
            else:
                return None
            rel = np.max(np.abs(step) / np.maximum(np.abs(phi), 1.0))
            phi = phi + step
            lam = max(lam * 0.3, 1e-12)
            if rel < step_tol:
                r = residuals(phi)
                return unpack(phi), float(r @ r), it + 1
        return None

    if initial_guess is not None:
        starts = [np.asarray(initial_guess, dtype=float)]
        if starts[0].shape != (4,) or np.any(starts[0][free] <= 0):
            raise ValueError("initial guess must be 4 positive parameters "
                             "(n_thermal, coherent_mag2, rabi, decay)")
    else:
        starts = _default_guesses(dataset, kind)
        if len(starts) > 6:
            # pre-screen by the residual at the start, keep the best few
            def sse(th):
                r = w * (model_of(th) - p_obs)
                return r @ r
            starts = sorted(starts, key=sse)[:6]

    best = None
    for theta0 in starts:
        out = gauss_newton(theta0)
        if out is not None and (best is None or out[1] < best[1]):
            best = out
    if best is None:
        raise FitError(f"no convergence after {max_iter} iterations from "
                       f"{len(starts)} starting point(s)")
    theta, _, n_iter = best
    # covariance in natural parameters from the final weighted Jacobian
    Jn = np.empty((len(t), len(free)))
    m0 = model_of(theta)
    for j, idx in enumerate(free):
        h = 1e-6 * max(abs(theta[idx]), 1e-6)
        thj = theta.copy()
        thj[idx] += h
        Jn[:, j] = w * (model_of(thj) - m0) / h
    JtJ = Jn.T @ Jn
    cond = np.linalg.cond(JtJ)
    if cond > 1e14:
        raise FitError(f"degenerate Jacobian (condition number {cond:.2e})")
    cov_free = np.linalg.inv(JtJ)
    cov = np.zeros((4, 4))
    cov[np.ix_(free, free)] = 0.5 * (cov_free + cov_free.T)
    r = w * (m0 - p_obs)
    return FitResult(theta[0], theta[1], theta[2], theta[3], cov,
                     float(r @ r), kind, n_iter)


def synthesize_flop(rng, pulse_times, n_thermal, coherent_mag2, rabi, decay,
                    eta, shots, kind: str = "thermal") -> FlopDataset:
    """Draw a binomial-shot-noise dataset from the flop model."""
    t = np.asarray(pulse_times, dtype=float)
    p = np.clip(flop_model(t, n_thermal, coherent_mag2, rabi, decay, eta,
                           kind=kind), 0.0, 1.0)
    shots = np.broadcast_to(np.asarray(shots), t.shape).astype(int)
    counts = rng.binomial(shots, p)
    return FlopDataset(t, counts / shots, shots, eta)
