"""Path simulation and Monte Carlo machinery.

Simulators for the fast-slow insolation/temperature system, the reduced
multiplicative-noise temperature SDE, and the linear anomaly SDE, plus the
coupled experiment quantifying the white-noise replacement error of the
integrated fast fluctuations.

Randomness comes from a counter-based Philox generator with one derived
substream per path, so ensembles are reproducible and path-parallel safe:
the trajectory of path k depends only on (seed, k).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptySample, StepTooLarge
from .model_core import (
    EbmParams,
    balance_residual,
    co_albedo,
    co_albedo_slope,
)

SCHEMES = ("euler-maruyama", "milstein")
DRIFT_FORMS = ("ito", "stratonovich-corrected")

_MAGIC = b"EBMVPB01"


@dataclass(frozen=True)
class SimConfig:
    dt: float
    n_steps: int
    n_paths: int
    seed: int = 0
    scheme: str = "euler-maruyama"
    drift_form: str = "ito"
    burn_in_fraction: float = 0.5

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1 or self.n_paths < 1:
            raise ValueError("n_steps and n_paths must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.drift_form not in DRIFT_FORMS:
            raise ValueError(f"drift_form must be one of {DRIFT_FORMS}")
        if not (0.0 <= self.burn_in_fraction < 1.0):
            raise ValueError("burn_in_fraction must lie in [0, 1)")


@dataclass
class PathBundle:
    """Ensemble of trajectories on a common time grid.

    `values` has shape (n_paths, n_steps+1) for scalar states and
    (n_paths, n_steps+1, d) for vector-valued states.
    """

    times: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("times must be strictly increasing")
        if self.values.shape[1] != self.times.size:
            raise ValueError("values and times are inconsistent")

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def to_csv(self) -> str:
        """`time,path_0,...` long format (scalar bundles only)."""
        if self.values.ndim != 2:
            raise ValueError("CSV export is defined for scalar bundles")
        buf = io.StringIO()
        buf.write("time," + ",".join(f"path_{k}" for k in range(self.n_paths)) + "\n")
        for j, t in enumerate(self.times):
            row = ",".join(f"{v:.17g}" for v in self.values[:, j])
            buf.write(f"{t:.17g},{row}\n")
        return buf.getvalue()

    def to_binary(self) -> bytes:
        """Compact little-endian float64 dump with a shape/seed header."""
        seed = int(self.meta.get("seed", 0))
        if self.values.ndim == 2:
            n_paths, n_times = self.values.shape
            d = 0
        else:
            n_paths, n_times, d = self.values.shape
        head = _MAGIC + struct.pack("<qqqq", n_paths, n_times, d, seed)
        body = self.times.astype("<f8").tobytes() + self.values.astype("<f8").tobytes()
        return head + body

    @classmethod
    def from_binary(cls, blob: bytes) -> "PathBundle":
        if blob[:8] != _MAGIC:
            raise ValueError("bad magic in binary path dump")
        n_paths, n_times, d, seed = struct.unpack("<qqqq", blob[8:40])
        times = np.frombuffer(blob, dtype="<f8", count=n_times, offset=40)
        off = 40 + 8 * n_times
        count = n_paths * n_times * (d if d else 1)
        vals = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        shape = (n_paths, n_times, d) if d else (n_paths, n_times)
        return cls(times=times.copy(), values=vals.reshape(shape).copy(),
                   meta={"seed": seed})


def path_generator(seed: int, path_index: int) -> np.random.Generator:
    """Philox substream for one path, keyed by (seed, path_index)."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(path_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gaussian_increments(seed, path_indices, n, columns=1):
    """Standard-normal draws, one row block per path, in stream order."""
    shape = (n,) if columns == 1 else (n, columns)
    out = np.empty((len(path_indices),) + shape)
    for row, k in enumerate(path_indices):
        out[row] = path_generator(seed, k).standard_normal(shape)
    return out


def _times(cfg: SimConfig) -> np.ndarray:
    return cfg.dt * np.arange(cfg.n_steps + 1)


def simulate_ou(tau, Q, x0, cfg: SimConfig, noise_scale=1.0) -> PathBundle:
    """Fast insolation process, distributionally exact at the grid times.

    One step uses the exact transition with mean-reversion rate 1/tau and
    stationary variance 1/2:
        X_{k+1} = Q + (X_k - Q) e^{-dt/tau} + xi_k,
        xi_k ~ N(0, (1/2)(1 - e^{-2 dt/tau})).
    """
    decay = np.exp(-cfg.dt / tau)
    sd = noise_scale * np.sqrt(0.5 * (1.0 - np.exp(-2.0 * cfg.dt / tau)))
    xi = gaussian_increments(cfg.seed, range(cfg.n_paths), cfg.n_steps)
    values = np.empty((cfg.n_paths, cfg.n_steps + 1))
    values[:, 0] = x0
    x = np.full(cfg.n_paths, float(x0))
    for k in range(cfg.n_steps):
        x = Q + (x - Q) * decay + sd * xi[:, k]
        values[:, k + 1] = x
    return PathBundle(times=_times(cfg), values=values,
                      meta={"seed": cfg.seed, "kind": "ou",
                            "tau": tau, "Q": Q, "x0": x0, "cfg": cfg})


def simulate_fast_slow(p: EbmParams, x0, theta0, cfg: SimConfig,
                       noise_scale=1.0):
    """Coupled fast insolation / slow temperature system.

    The insolation is advanced by the exact transition, the temperature by
    explicit Euler of dT/dt = X beta(T) + lambda - (r0 + r1 T); both live on
    the same grid and draw from the same per-path stream.
    """
    guard = cfg.dt * (p.r1 + abs(p.Q) * p.slope)
    if guard > 1.0:
        raise StepTooLarge(
            f"dt*(r1 + |Q|*s) = {guard:.3g} > 1; reduce dt"
        )
    decay = np.exp(-cfg.dt / p.tau)
    sd = noise_scale * np.sqrt(0.5 * (1.0 - np.exp(-2.0 * cfg.dt / p.tau)))
    xi = gaussian_increments(cfg.seed, range(cfg.n_paths), cfg.n_steps)
    xs = np.empty((cfg.n_paths, cfg.n_steps + 1))
    ts = np.empty_like(xs)
    xs[:, 0] = x0
    ts[:, 0] = theta0
    x = np.full(cfg.n_paths, float(x0))
    T = np.full(cfg.n_paths, float(theta0))
    for k in range(cfg.n_steps):
        drift = x * co_albedo(T, p) + p.lam - (p.r0 + p.r1 * T)
        T = T + cfg.dt * drift
        x = p.Q + (x - p.Q) * decay + sd * xi[:, k]
        xs[:, k + 1] = x
        ts[:, k + 1] = T
    times = _times(cfg)
    meta = {"seed": cfg.seed, "cfg": cfg, "params": p}
    return (PathBundle(times=times, values=xs, meta={**meta, "kind": "fast"}),
            PathBundle(times=times, values=ts, meta={**meta, "kind": "slow"}))


@dataclass(frozen=True)
class WongZakaiResult:
    mc_estimate: float
    exact: float
    se: float
    tau: float
    t: float


def wong_zakai_exact(tau, t, x0, Q) -> float:
    """Closed-form mean-square gap between the integrated fast fluctuations
    and the Brownian driver at time t."""
    return (tau * (1.0 - np.exp(-t / tau)) ** 2 * (x0 - Q) ** 2
            + 0.5 * tau * (1.0 - np.exp(-2.0 * t / tau)))


def wong_zakai_error(tau, t, x0, Q, n_paths, seed=0,
                     steps_per_tau=200) -> WongZakaiResult:
    """Monte Carlo estimate of E|W^tau_t - W_t|^2 against the closed form.

    The fast process and the Brownian motion are driven by the SAME
    increments on a fine grid (Euler step for the fast process, h << tau);
    the integrated fluctuations use trapezoid quadrature, which matches the
    C^1 regularity of the smoothed driver.
    """
    if t <= 0.0 or tau <= 0.0:
        raise ValueError("t and tau must be positive")
    n_steps = max(1000, int(np.ceil(steps_per_tau * t / tau)))
    h = t / n_steps
    sqrt_h = np.sqrt(h)
    inv_sqrt_tau = 1.0 / np.sqrt(tau)

    # Path batching keeps the increment matrix bounded in memory.
    batch = max(1, int(2.0e7 // n_steps))
    sq = np.empty(n_paths)
    done = 0
    while done < n_paths:
        idx = range(done, min(done + batch, n_paths))
        dW = sqrt_h * gaussian_increments(seed, idx, n_steps)
        B = dW.shape[0]
        x = np.full(B, float(x0))
        W = np.zeros(B)
        integral = np.zeros(B)
        for k in range(n_steps):
            x_new = x + (h / tau) * (Q - x) + inv_sqrt_tau * dW[:, k]
            integral += 0.5 * h * ((x - Q) + (x_new - Q))
            W += dW[:, k]
            x = x_new
        diff = inv_sqrt_tau * integral - W
        sq[done:done + B] = diff**2
        done += B

    mc = float(np.mean(sq))
    se = float(np.std(sq, ddof=1) / np.sqrt(n_paths))
    return WongZakaiResult(mc_estimate=mc, exact=float(wong_zakai_exact(tau, t, x0, Q)),
                           se=se, tau=tau, t=t)


def simulate_reduced_sde(p: EbmParams, T0, cfg: SimConfig,
                         noise_scale=1.0) -> PathBundle:
    """Reduced multiplicative-noise temperature SDE.

    dT = (Q beta(T) + lambda - r0 - r1 T [+ (tau/2) beta beta']) dt
         + sqrt(tau) beta(T) dW,
    with the optional Stratonovich-correction drift toggled by
    cfg.drift_form and the Milstein term by cfg.scheme.
    """
    guard = cfg.dt * (p.r1 + abs(p.Q) * p.slope)
    if guard > 1.0:
        raise StepTooLarge(f"dt*(r1 + |Q|*s) = {guard:.3g} > 1; reduce dt")
    sqrt_dt = np.sqrt(cfg.dt)
    sqrt_tau = np.sqrt(p.tau)
    xi = gaussian_increments(cfg.seed, range(cfg.n_paths), cfg.n_steps)
    values = np.empty((cfg.n_paths, cfg.n_steps + 1))
    values[:, 0] = T0
    T = np.full(cfg.n_paths, float(T0))
    corrected = cfg.drift_form == "stratonovich-corrected"
    milstein = cfg.scheme == "milstein"
    for k in range(cfg.n_steps):
        beta = co_albedo(T, p)
        dbeta = co_albedo_slope(T, p)
        drift = balance_residual(T, p)
        if corrected:
            drift = drift + 0.5 * p.tau * beta * dbeta
        dW = noise_scale * sqrt_dt * xi[:, k]
        T = T + cfg.dt * drift + sqrt_tau * beta * dW
        if milstein:
            T = T + 0.5 * p.tau * beta * dbeta * (dW**2 - noise_scale**2 * cfg.dt)
        values[:, k + 1] = T
    return PathBundle(times=_times(cfg), values=values,
                      meta={"seed": cfg.seed, "kind": "reduced",
                            "cfg": cfg, "params": p})


def simulate_linear_anomaly(b, sigma0, sigma1, tau, y0,
                            cfg: SimConfig, noise_scale=1.0) -> PathBundle:
    """Linearised anomaly SDE dY = -b Y dt + sqrt(tau)(sigma0 + sigma1 Y) dW."""
    if cfg.dt * b > 1.0:
        raise StepTooLarge(f"dt*b = {cfg.dt * b:.3g} > 1; reduce dt")
    sqrt_dt = np.sqrt(cfg.dt)
    sqrt_tau = np.sqrt(tau)
    xi = gaussian_increments(cfg.seed, range(cfg.n_paths), cfg.n_steps)
    values = np.empty((cfg.n_paths, cfg.n_steps + 1))
    values[:, 0] = y0
    y = np.full(cfg.n_paths, float(y0))
    milstein = cfg.scheme == "milstein"
    for k in range(cfg.n_steps):
        dW = noise_scale * sqrt_dt * xi[:, k]
        sig = sigma0 + sigma1 * y
        y_new = y - cfg.dt * b * y + sqrt_tau * sig * dW
        if milstein:
            y_new = y_new + 0.5 * tau * sigma1 * sig * (dW**2 - noise_scale**2 * cfg.dt)
        y = y_new
        values[:, k + 1] = y
    return PathBundle(times=_times(cfg), values=values,
                      meta={"seed": cfg.seed, "kind": "linear-anomaly",
                            "cfg": cfg, "b": b, "sigma0": sigma0,
                            "sigma1": sigma1, "tau": tau})


@dataclass(frozen=True)
class MomentReport:
    mean: np.ndarray | float
    variance: np.ndarray | float
    se_mean: np.ndarray | float
    se_variance: np.ndarray | float
    pooled: bool


def mc_moments(bundle: PathBundle, burn_in_fraction=None,
               pooled=False) -> MomentReport:
    """Unbiased sample statistics with standard errors.

    Per-time mode returns arrays over the retained grid.  Pooled mode
    averages over retained times; its standard errors come from the spread
    of per-path statistics, so temporal correlation within a path does not
    bias them downwards.
    """
    vals = bundle.values
    if vals.ndim != 2:
        raise ValueError("mc_moments operates on scalar bundles")
    if vals.size == 0:
        raise EmptySample("empty bundle")
    if burn_in_fraction is None:
        cfg = bundle.meta.get("cfg")
        burn_in_fraction = cfg.burn_in_fraction if cfg is not None else 0.0
    n_times = vals.shape[1]
    start = int(np.floor(burn_in_fraction * n_times))
    retained = vals[:, start:]
    if retained.size == 0:
        raise EmptySample("burn-in removed every sample")
    n = retained.shape[0]

    if pooled:
        grand_mean = float(np.mean(retained))
        per_path_mean = retained.mean(axis=1)
        per_path_sq = ((retained - grand_mean) ** 2).mean(axis=1)
        variance = float(np.mean(per_path_sq))
        if n > 1:
            se_mean = float(np.std(per_path_mean, ddof=1) / np.sqrt(n))
            se_var = float(np.std(per_path_sq, ddof=1) / np.sqrt(n))
        else:
            se_mean = se_var = float("nan")
        return MomentReport(mean=grand_mean, variance=variance,
                            se_mean=se_mean, se_variance=se_var, pooled=True)

    mean = retained.mean(axis=0)
    if n > 1:
        variance = retained.var(axis=0, ddof=1)
        se_mean = np.sqrt(variance / n)
        se_var = variance * np.sqrt(2.0 / (n - 1))
    else:
        variance = np.zeros(retained.shape[1])
        se_mean = np.full(retained.shape[1], np.nan)
        se_var = np.full(retained.shape[1], np.nan)
    return MomentReport(mean=mean, variance=variance,
                        se_mean=se_mean, se_variance=se_var, pooled=False)
