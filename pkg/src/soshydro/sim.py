"""Time integration of the slope SDE on a ring and in a box.

Periodic dynamics run in macroscopic time with step ``dt = c_dt / N**4``.
Every update is the second difference of a per-bond vector

    q_i = (N^4/2) w_i dt + (N^2/2) E(t, i/N) a_i dt + N^2 sqrt(a_i dt) xi_i,
    x  <-  x - (D^2 q),

so ``sum_i x_i`` is conserved structurally.  Box dynamics use the unscaled
generator with interior stencils only, which conserves both the block mean
and the linear mean of the window.

Three schemes are available.

* ``scheme=0``: explicit Euler-Maruyama.
* ``scheme=1``: semi-implicit Crank-Nicolson, which averages the linear part
  ``a * Laplacian`` of the current over the old and new states with the
  mobility frozen.  For constant mobility it leaves the Gaussian equilibrium
  invariant exactly at every step size.
* ``scheme=2`` (default): a sweep over the stencils, alternating direction
  from step to step.  Each stencil move is a Crank-Nicolson proposal for the
  one-dimensional line through the current state, corrected by a Metropolis
  test, so the equilibrium measure is invariant for every mobility.  The
  field shift is applied after each move.
"""
from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import kernels
from .gibbs import CanonicalSpec, make_rng, sample_canonical
from .lattice import (
    ConservedPair,
    Mobility,
    conserved_pair_array,
    current_field,
    mobility_field,
    parse_mobility,
)

__all__ = [
    "NumericalError",
    "SCHEME_EM",
    "SCHEME_CN",
    "SCHEME_SWEEP",
    "SimParams",
    "Trajectory",
    "drift_vector",
    "step",
    "simulate",
    "simulate_replicas",
    "box_simulate",
    "box_dt_limit",
    "pair_empirical",
    "AutoCorrelation",
    "autocorrelation",
    "write_trajectory",
    "read_trajectory",
]

SCHEME_EM = 0
SCHEME_CN = 1
SCHEME_SWEEP = 2
_SCHEMES = {"em": SCHEME_EM, "euler-maruyama": SCHEME_EM, "cn": SCHEME_CN, "crank-nicolson": SCHEME_CN,
            "sweep": SCHEME_SWEEP, "mh-sweep": SCHEME_SWEEP}


class NumericalError(FloatingPointError):
    """Non-finite state; ``step`` is the index of the offending step."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


def _scheme_code(scheme) -> int:
    if isinstance(scheme, str):
        try:
            return _SCHEMES[scheme.lower()]
        except KeyError:
            raise ValueError(f"unknown scheme {scheme!r}") from None
    if scheme not in (SCHEME_EM, SCHEME_CN, SCHEME_SWEEP):
        raise ValueError(f"unknown scheme {scheme!r}")
    return int(scheme)


@dataclass(frozen=True)
class SimParams:
    """Parameters of a periodic run.

    Parameters
    ----------
    n_sites : int
        Ring size ``N >= 8``.
    mobility : Mobility or str
        Mobility record or registry spec such as ``"bump(0.1)"``.
    c_dt : float
        Step factor in ``(0, 0.25]``; the step is ``c_dt / N**4``.
    horizon : float
        Macroscopic final time ``T > 0``.
    field : callable, optional
        Electromigration field ``E(t, theta)``, vectorized in ``theta``.
    stride : int, optional
        Record every ``stride`` steps; by default only the initial and final
        states are recorded.
    scheme : {2, 1, 0} or str
        ``2``/``"sweep"`` Metropolis-adjusted sweep (default),
        ``1``/``"cn"`` semi-implicit or ``0``/``"em"`` explicit.
    field_interval : int, optional
        Steps between re-evaluations of a time-dependent field; the field is
        evaluated at the midpoint of each interval.  Defaults to ``stride``
        (or the whole run), which is exact for static fields.
    """

    n_sites: int
    mobility: Mobility | str = "constant(1)"
    c_dt: float = 0.25
    horizon: float = 0.01
    field: Callable | None = None
    stride: int | None = None
    scheme: int | str = SCHEME_SWEEP
    field_interval: int | None = None

    def __post_init__(self):
        if self.n_sites < 8:
            raise ValueError("SimParams requires N >= 8")
        if not 0.0 < self.c_dt <= 0.25:
            raise ValueError("c_dt must lie in (0, 0.25]")
        if not self.horizon >= 0.0:
            raise ValueError("horizon must be >= 0")
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.field_interval is not None and self.field_interval < 1:
            raise ValueError("field_interval must be >= 1")
        if isinstance(self.mobility, (str, dict)):
            object.__setattr__(self, "mobility", parse_mobility(self.mobility))
        object.__setattr__(self, "scheme", _scheme_code(self.scheme))

    @property
    def dt(self) -> float:
        return self.c_dt / float(self.n_sites) ** 4

    @property
    def n_steps(self) -> int:
        if self.horizon == 0.0:
            return 0
        return max(1, int(round(self.horizon / self.dt)))

    def coefficients(self) -> tuple[float, float, float]:
        """``(dt N^4/2, dt N^2/2, N^2 sqrt(dt))`` used by the kernels."""
        n = float(self.n_sites)
        dt = self.dt
        return 0.5 * dt * n**4, 0.5 * dt * n**2, n**2 * np.sqrt(dt)


@dataclass
class Trajectory:
    """Recorded states of one run.

    Attributes
    ----------
    times : ndarray (k,)
        Strictly increasing record times.
    configs : ndarray (k, n) or None
        Snapshots, when recorded.
    observables : dict of str to ndarray (k,)
    drift : ndarray (k,) or (k, 2)
        Running maximum of the absolute drift of the conserved quantities
        (``sum x`` on a ring, ``(y1, y2)`` in a box) since the start.
    """

    times: np.ndarray
    configs: np.ndarray | None
    observables: dict = field(default_factory=dict)
    drift: np.ndarray | None = None
    final: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Periodic dynamics
# ---------------------------------------------------------------------------


def _field_values(field, t, n):
    if field is None:
        return None
    if callable(field):
        theta = np.arange(n) / n
        return np.ascontiguousarray(np.broadcast_to(field(t, theta), (n,)), dtype=float)
    return np.ascontiguousarray(np.broadcast_to(np.asarray(field, float), (n,)))


def _d2(v):
    return np.roll(v, 1, axis=-1) - 2.0 * v + np.roll(v, -1, axis=-1)


def drift_vector(x, mob: Mobility, t: float = 0.0, field=None) -> np.ndarray:
    """Drift rates of the periodic slope SDE in macroscopic time.

    Computed as ``-D^2 q`` with the per-bond vector
    ``q_i = (N^4/2) w_i + (N^2/2) E(t, i/N) a_i``, so the entries sum to zero
    up to rounding.

    Parameters
    ----------
    x : ndarray (N,)
    mob : Mobility
    t : float
        Time at which a callable field is evaluated.
    field : callable or array, optional
        Electromigration field ``E(t, theta)`` or its values at the sites.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    q = 0.5 * float(n) ** 4 * current_field(x, mob, periodic=True)
    e = _field_values(field, t, n)
    if e is not None:
        a, _ = mobility_field(x, mob, periodic=True)
        q = q + 0.5 * float(n) ** 2 * e * a
    return -_d2(q)


def step(x, params: SimParams, t: float, rng: np.random.Generator, noise: bool = True, backend=None) -> np.ndarray:
    """One step of the periodic dynamics; returns the new state.

    ``noise=False`` zeroes the Brownian increments (the random stream is
    still consumed) and is meant for testing.
    """
    x = np.array(x, dtype=float)
    if x.shape != (params.n_sites,):
        raise ValueError("state does not match n_sites")
    c4, c2, ns = params.coefficients()
    e = _field_values(params.field, t + 0.5 * params.dt, params.n_sites)
    _, bad, _ = kernels.run_periodic(x, params.mobility, 1, c4, c2, ns if noise else 0.0, e,
                                     params.scheme, rng, None, 2, backend, int(round(t / params.dt)))
    if bad >= 0:
        raise NumericalError("non-finite state at step 0", 0)
    return x


def _record_steps(n_steps: int, stride: int | None) -> list[int]:
    if n_steps == 0:
        return []
    if stride is None:
        return [n_steps]
    pts = list(range(stride, n_steps + 1, stride))
    if not pts or pts[-1] != n_steps:
        pts.append(n_steps)
    return pts


def simulate(initial, params: SimParams, rng: np.random.Generator, *, observables: Mapping[str, Callable] | None = None,
             record_configs: bool = True, t0: float = 0.0, backend=None) -> Trajectory:
    """Integrate the periodic dynamics up to ``params.horizon``.

    Parameters
    ----------
    initial : ndarray (N,)
    params : SimParams
    rng : numpy.random.Generator
    observables : mapping, optional
        Named functions of a state recorded at every record time.
    record_configs : bool
        Keep full snapshots.

    Raises
    ------
    NumericalError
        If the state becomes non-finite; the step index is reported.
    """
    x = np.array(initial, dtype=float)
    n = params.n_sites
    if x.shape != (n,):
        raise ValueError(f"initial state has shape {x.shape}, expected ({n},)")
    observables = dict(observables or {})
    c4, c2, ns = params.coefficients()
    dt = params.dt
    total = params.n_steps
    records = _record_steps(total, params.stride)
    interval = params.field_interval
    static_field = params.field is None or not callable(params.field)
    s0 = float(x.sum())

    times = [t0]
    snaps = [x.copy()] if record_configs else None
    obs = {k: [float(f(x))] for k, f in observables.items()}
    drift = [0.0]
    done = 0
    rejected = 0
    e = _field_values(params.field, t0, n) if static_field else None
    empty = np.zeros((0, n))
    for target in records:
        while done < target:
            m = target - done
            if not static_field:
                if interval is not None:
                    m = min(m, interval - done % interval)
                e = _field_values(params.field, t0 + (done + 0.5 * m) * dt, n)
            _, bad, rej = kernels.run_periodic(x, params.mobility, m, c4, c2, ns, e, params.scheme, rng,
                                               empty, m + 1, backend, done)
            rejected += rej
            if bad >= 0:
                raise NumericalError(f"non-finite state at step {done + bad}", done + bad)
            done += m
        times.append(t0 + done * dt)
        if record_configs:
            snaps.append(x.copy())
        for k, f in observables.items():
            obs[k].append(float(f(x)))
        drift.append(max(drift[-1], abs(float(x.sum()) - s0)))
    return Trajectory(
        times=np.asarray(times),
        configs=None if snaps is None else np.asarray(snaps),
        observables={k: np.asarray(v) for k, v in obs.items()},
        drift=np.asarray(drift),
        final=x,
        meta={"dt": dt, "n_steps": total, "scheme": params.scheme,
              "acceptance": _acceptance(rejected, total, n, params.scheme),
              "backend": kernels.resolve_backend(params.mobility, backend)},
    )


def _acceptance(rejected: int, steps: int, n_stencils: int, scheme: int) -> float:
    # Fraction of accepted stencil moves; 1 for the schemes without a test.
    if scheme != SCHEME_SWEEP or steps == 0:
        return 1.0
    return 1.0 - rejected / (steps * n_stencils)


def _replica_job(args):
    initial, params, seed, keys, observables, record_configs, backend = args
    return simulate(initial, params, make_rng(seed, *keys), observables=observables,
                    record_configs=record_configs, backend=backend)


def simulate_replicas(initials, params: SimParams, seed: int, keys: tuple = (), *, observables=None,
                      record_configs: bool = True, workers: int = 1, backend=None) -> list[Trajectory]:
    """Run independent replicas; replica ``r`` uses ``make_rng(seed, *keys, r)``.

    Results are ordered by replica index whatever the number of workers.
    Observables must be picklable when ``workers > 1``.
    """
    initials = np.asarray(initials, dtype=float)
    jobs = [(initials[r], params, seed, tuple(keys) + (r,), observables, record_configs, backend)
            for r in range(initials.shape[0])]
    if workers <= 1 or len(jobs) <= 1:
        return [_replica_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_replica_job, jobs))


def pair_empirical(x, phi: Callable) -> np.ndarray | float:
    """Pairing ``<pi_N, phi> = (1/N) sum_i phi(i/N) x_i`` of the empirical measure.

    ``x`` may carry leading batch axes; sites run along the last axis and
    site ``i`` (0-based) sits at ``theta = i/N``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    w = np.asarray(phi(np.arange(n) / n), dtype=float)
    r = x @ w / n
    return float(r) if np.ndim(r) == 0 else r


# ---------------------------------------------------------------------------
# Box dynamics
# ---------------------------------------------------------------------------


def box_dt_limit(mob: Mobility, scheme=SCHEME_SWEEP) -> float:
    """Largest admissible box step: ``0.25/a*`` (sweep or semi-implicit) or ``0.25/(96 a*)`` (explicit)."""
    a_star = mob.upper_bound
    return 0.25 / (6.0 * a_star * 16.0) if _scheme_code(scheme) == SCHEME_EM else 0.25 / a_star


def box_simulate(window, mob: Mobility, dt: float, steps: int, rng: np.random.Generator, *, stride: int = 1,
                 scheme=SCHEME_SWEEP, record_configs: bool = True, observables: Mapping[str, Callable] | None = None,
                 backend=None) -> Trajectory:
    """Run the unscaled box dynamics on a window of ``2l+1`` slopes.

    Parameters
    ----------
    window : ndarray (2l+1,)
        Initial slopes ``x_{-l}..x_l`` with ``l >= 2``.
    dt : float
        Step in unscaled time, at most ``box_dt_limit(mob, scheme)``.
    steps : int
        Number of steps.
    stride : int
        Record every ``stride`` steps.

    Returns
    -------
    Trajectory
        ``drift`` has two columns, the running maxima of ``|y1 - y1(0)|``
        and ``|y2 - y2(0)|``.
    """
    x = np.array(window, dtype=float)
    n = x.shape[0]
    if n < 5 or n % 2 == 0:
        raise ValueError("box window must have 2l+1 sites with l >= 2")
    code = _scheme_code(scheme)
    if not 0.0 < dt <= box_dt_limit(mob, code) * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds the box limit {box_dt_limit(mob, code)}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    observables = dict(observables or {})
    y0 = np.array(conserved_pair_array(x))
    times = [0.0]
    snaps = [x.copy()] if record_configs else None
    obs = {k: [float(f(x))] for k, f in observables.items()}
    drift = [np.zeros(2)]
    done = 0
    rejected = 0
    empty = np.zeros((0, n))
    while done + stride <= steps:
        _, bad, rej = kernels.run_box(x, mob, stride, dt, code, rng, empty, stride + 1, backend, done)
        rejected += rej
        if bad >= 0:
            raise NumericalError(f"non-finite state at step {done + bad}", done + bad)
        done += stride
        times.append(done * dt)
        if record_configs:
            snaps.append(x.copy())
        for k, f in observables.items():
            obs[k].append(float(f(x)))
        y = np.array(conserved_pair_array(x))
        drift.append(np.maximum(drift[-1], np.abs(y - y0)))
    if done < steps:
        _, bad, rej = kernels.run_box(x, mob, steps - done, dt, code, rng, empty, steps - done + 1, backend, done)
        rejected += rej
        if bad >= 0:
            raise NumericalError(f"non-finite state at step {done + bad}", done + bad)
    return Trajectory(
        times=np.asarray(times),
        configs=None if snaps is None else np.asarray(snaps),
        observables={k: np.asarray(v) for k, v in obs.items()},
        drift=np.asarray(drift),
        final=x,
        meta={"dt": dt, "n_steps": int(steps), "scheme": code,
              "acceptance": _acceptance(rejected, steps, n - 2, code)},
    )


@dataclass(frozen=True)
class AutoCorrelation:
    """Stationary autocorrelation ``C(tau)`` with batch-mean error bars."""

    lags: np.ndarray  # in steps
    times: np.ndarray  # lags * dt
    values: np.ndarray
    stderr: np.ndarray
    mean: float
    n_batches: int
    series_length: int
    batches: np.ndarray | None = field(default=None, repr=False)


def _batch_autocov(series: np.ndarray, max_lag: int, mean: float) -> np.ndarray:
    s = series - mean
    m = s.size
    nfft = 1 << int(np.ceil(np.log2(2 * m)))
    f = np.fft.rfft(s, nfft)
    acf = np.fft.irfft(f * np.conj(f), nfft)[: max_lag + 1]
    return acf / (m - np.arange(max_lag + 1))


def observable_series(g: Callable, l: int, mob: Mobility, dt: float, n_samples: int, rng: np.random.Generator, *,
                      y: ConservedPair = ConservedPair(0.0, 0.0), alpha: float = 0.0, sample_every: int = 1,
                      burn_in: int = 0, scheme=SCHEME_SWEEP, chunk: int = 8192, start=None, backend=None) -> np.ndarray:
    """Series ``g(x_{k * sample_every})`` of a box run started at canonical equilibrium.

    ``g`` maps an array of windows ``(m, 2l+1)`` to ``(m,)``.
    """
    n = 2 * l + 1
    x = sample_canonical(CanonicalSpec(y, l, alpha), rng) if start is None else np.array(start, dtype=float)
    code = _scheme_code(scheme)
    if not 0.0 < dt <= box_dt_limit(mob, code) * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds the box limit {box_dt_limit(mob, code)}")
    if burn_in > 0:
        _, bad, _ = kernels.run_box(x, mob, burn_in, dt, code, rng, np.zeros((0, n)), burn_in + 1, backend)
        if bad >= 0:
            raise NumericalError(f"non-finite state at burn-in step {bad}", bad)
    out = np.empty(n_samples)
    out[0] = float(np.asarray(g(x[None, :]))[0])
    buf = np.empty((chunk, n))
    got = 1
    done = burn_in
    while got < n_samples:
        m = min(chunk, n_samples - got)
        _, bad, _ = kernels.run_box(x, mob, m * sample_every, dt, code, rng, buf[:m], sample_every, backend, done)
        done += m * sample_every
        if bad >= 0:
            raise NumericalError(f"non-finite state at step {bad}", bad)
        out[got : got + m] = np.asarray(g(buf[:m]), dtype=float)
        got += m
    return out


def autocorrelation(g: Callable, l: int, mob: Mobility, dt: float, max_lag: int, n_samples: int,
                    rng: np.random.Generator, *, y: ConservedPair = ConservedPair(0.0, 0.0), alpha: float = 0.0,
                    sample_every: int = 1, n_batches: int = 20, burn_in: int = 0, scheme=SCHEME_SWEEP,
                    backend=None) -> AutoCorrelation:
    """Empirical ``C(tau) = <g(x_tau) g(x_0)> - <g>^2`` under the box dynamics.

    The run starts from an exact canonical sample.  The series is split into
    ``n_batches`` contiguous batches; ``C`` is the mean of the per-batch
    autocovariances (about the global mean) and its error is their standard
    error.  Lags are counted in recorded samples, ``sample_every`` steps apart.

    Raises
    ------
    ValueError
        If a batch is shorter than ``4 * max_lag`` samples.
    """
    if n_batches < 2:
        raise ValueError("need at least two batches")
    blen = n_samples // n_batches
    if blen < 4 * max(max_lag, 1):
        raise ValueError(f"insufficient trajectory length: batch of {blen} samples for max lag {max_lag}")
    s = observable_series(g, l, mob, dt, n_samples, rng, y=y, alpha=alpha, sample_every=sample_every,
                          burn_in=burn_in, scheme=scheme, backend=backend)
    mean = float(s.mean())
    per = np.array([_batch_autocov(s[b * blen : (b + 1) * blen], max_lag, mean) for b in range(n_batches)])
    lags = np.arange(max_lag + 1)
    return AutoCorrelation(
        lags=lags * sample_every,
        times=lags * sample_every * dt,
        values=per.mean(axis=0),
        stderr=per.std(axis=0, ddof=1) / np.sqrt(n_batches),
        mean=mean,
        n_batches=n_batches,
        series_length=int(n_samples),
        batches=per,
    )


# ---------------------------------------------------------------------------
# Trajectory files
# ---------------------------------------------------------------------------

_MAGIC = b"SOSTRAJ1"


def write_trajectory(traj: Trajectory, path, fmt: str = "csv") -> None:
    """Write recorded snapshots.

    ``csv``: one row per record, ``t, x_0, ..., x_{N-1}`` with ``repr``
    precision.  ``bin``: the 8-byte magic ``SOSTRAJ1``, a little-endian
    uint32 header length, a JSON header ``{"n_sites", "n_records"}``, then
    per record one float64 time followed by ``N`` float64 values, all
    little-endian.
    """
    if traj.configs is None:
        raise ValueError("trajectory has no recorded configurations")
    k, n = traj.configs.shape
    if fmt == "csv":
        with open(path, "w") as fh:
            fh.write("t," + ",".join(f"x{i}" for i in range(n)) + "\n")
            for t, row in zip(traj.times, traj.configs):
                fh.write(",".join(repr(float(v)) for v in (t, *row)) + "\n")
    elif fmt == "bin":
        header = json.dumps({"n_sites": int(n), "n_records": int(k)}).encode()
        frames = np.column_stack([traj.times, traj.configs]).astype("<f8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<I", len(header)) + header)
            fh.write(frames.tobytes())
    else:
        raise ValueError(f"unknown trajectory format {fmt!r}")


def read_trajectory(path) -> Trajectory:
    """Read a file written by ``write_trajectory`` (format detected from content)."""
    with open(path, "rb") as fh:
        head = fh.read(len(_MAGIC))
        if head == _MAGIC:
            (hlen,) = struct.unpack("<I", fh.read(4))
            meta = json.loads(fh.read(hlen))
            n, k = meta["n_sites"], meta["n_records"]
            data = np.frombuffer(fh.read(), dtype="<f8").reshape(k, n + 1)
        else:
            fh.seek(0)
            data = np.loadtxt(fh, delimiter=",", skiprows=1, ndmin=2)
    return Trajectory(times=data[:, 0].astype(float), configs=data[:, 1:].astype(float))
