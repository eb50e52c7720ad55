"""Error-trajectory measurement and numerical checks of the error-propagation bounds."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ContractError
from .looplm import LoopedModel, forward, loop_function
from .methods.cta import TransitionAdapterParams, cta_transition
from .quant import QuantizedLinear, QuantScheme, QuantSpec


class VerificationError(AssertionError):
    pass


def _fro(x: np.ndarray) -> float:
    return float(np.sqrt(np.sum(x * x)))


@dataclass
class ErrorTrajectory:
    """Per-(t, l) relative errors plus loop-level eps_t, eps_t^quant and gamma_t.

    ``eps`` has T + 1 entries (loop inputs H_0..H_T); ``eps_quant`` and
    ``gamma`` have T. gamma_t is the realized ratio
    ||F(H~_t) - F(H_t)|| / ||H~_t - H_t|| (0 when both are 0).
    """

    rel_err: np.ndarray   # (T, L + 1)
    eps: np.ndarray       # (T + 1,)
    eps_quant: np.ndarray  # (T,)
    gamma: np.ndarray     # (T,)

    @property
    def T(self) -> int:
        return len(self.eps_quant)

    def final_loop_error(self) -> float:
        """Mean relative error over the layer outputs of the last loop."""
        return float(self.rel_err[-1, 1:].mean())

    def rows(self) -> list[dict]:
        out = []
        T, L1 = self.rel_err.shape
        for t in range(T):
            for layer in range(L1):
                out.append({"t": t, "layer": layer, "rel_err": float(self.rel_err[t, layer]),
                            "eps_t": float(self.eps[t]), "eps_quant": float(self.eps_quant[t]),
                            "gamma": float(self.gamma[t])})
        return out

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}


def measure_error_trajectory(model: LoopedModel, scheme: QuantScheme | None,
                             adapters: TransitionAdapterParams | None, tokens: np.ndarray,
                             T: int | None = None) -> ErrorTrajectory:
    """Compare quantized and full-precision runs on identical inputs.

    ``scheme=None`` runs the "quantized" side in full precision (all errors 0).
    """
    T = model.T if T is None else T
    fp = forward(model, tokens, record=True, T=T)
    linear = QuantizedLinear(scheme) if scheme is not None else None
    kw = {"linear": linear} if linear is not None else {}
    q = forward(model, tokens, record=True, T=T, transition=cta_transition(adapters), **kw)
    L = model.L
    rel = np.zeros((T, L + 1))
    for t in range(T):
        for layer in range(L + 1):
            h, hq = fp.states[t][layer].value, q.states[t][layer].value
            den = _fro(h)
            rel[t, layer] = _fro(hq - h) / den if den > 0 else 0.0
    H = [fp.states[t][0].value for t in range(T)] + [fp.final.value]
    Hq = [q.states[t][0].value for t in range(T)] + [q.final.value]
    eps = np.array([_fro(Hq[t] - H[t]) for t in range(T + 1)])
    eps_q = np.zeros(T)
    gamma = np.zeros(T)
    for t in range(T):
        f_q = loop_function(model, Hq[t], t).value
        eps_q[t] = _fro(Hq[t + 1] - f_q)
        num = _fro(f_q - H[t + 1])
        gamma[t] = num / eps[t] if eps[t] > 0 else 0.0
    return ErrorTrajectory(rel, eps, eps_q, gamma)


# ---------------------------------------------------------------------------
# recursion bound
# ---------------------------------------------------------------------------

@dataclass
class Prop2Verdict:
    one_step_lhs: list[float]
    one_step_rhs: list[float]
    one_step_ok: list[bool]
    unrolled_bound: float
    eps_T: float
    unrolled_ok: bool
    slack: float

    @property
    def ok(self) -> bool:
        return all(self.one_step_ok) and self.unrolled_ok

    @property
    def margins(self) -> list[float]:
        return [r - l for l, r in zip(self.one_step_lhs, self.one_step_rhs)]

    def raise_if_failed(self) -> None:
        if not self.ok:
            raise VerificationError(f"recursion bound violated: {self}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(ok=self.ok, margins=self.margins)
        return d


def unrolled_bound(eps_quant: np.ndarray, gamma: np.ndarray, eps0: float = 0.0) -> float:
    """sum_tau (prod_{t > tau} gamma_t) eps_tau^quant + (prod_t gamma_t) eps_0."""
    T = len(eps_quant)
    total = float(np.prod(gamma)) * eps0
    for tau in range(T):
        total += float(np.prod(gamma[tau + 1:])) * eps_quant[tau]
    return total


def verify_prop2(traj: ErrorTrajectory, slack: float = 1e-9) -> Prop2Verdict:
    """Check eps_{t+1} <= eps_t^quant + gamma_t eps_t and the unrolled bound."""
    lhs, rhs, ok = [], [], []
    for t in range(traj.T):
        left = float(traj.eps[t + 1])
        right = float(traj.eps_quant[t] + traj.gamma[t] * traj.eps[t])
        lhs.append(left)
        rhs.append(right)
        ok.append(left <= right + slack * max(1.0, abs(right)))
    bound = unrolled_bound(traj.eps_quant, traj.gamma, float(traj.eps[0]))
    eps_T = float(traj.eps[-1])
    return Prop2Verdict(lhs, rhs, ok, bound, eps_T,
                        eps_T <= bound + slack * max(1.0, bound), slack)


# ---------------------------------------------------------------------------
# shared vs per-loop calibration under drift
# ---------------------------------------------------------------------------

def _qerr(x: np.ndarray, c: float, bits: int) -> np.ndarray:
    lo, hi = QuantSpec.qrange(bits)
    return (c * np.clip(np.rint(x / c), lo, hi) - x) ** 2


@dataclass
class Prop1Report:
    scales: list[float]
    bits: int
    c_per_loop: list[float]
    c_shared: float
    err_per_loop_opt: list[float]
    err_shared: list[float]
    excess: list[float]
    excess_se: list[float]
    margin: float
    margin_se: float
    n_samples: int

    @property
    def z(self) -> float:
        return self.margin / self.margin_se if self.margin_se > 0 else (
            np.inf if self.margin > 0 else 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["z"] = float(self.z)
        return d


def clip_grid(scales, bits: int, points: int = 200) -> np.ndarray:
    """Log-spaced candidate scales covering both loops' plausible optima."""
    qmax = QuantSpec.qrange(bits)[1]
    return np.geomspace(0.05 * min(scales) / qmax, 8.0 * max(scales) / qmax, points)


def verify_prop1(scales=(1.0, 4.0), bits: int = 4, n: int = 100_000, points: int = 200,
                 seed: int = 0) -> Prop1Report:
    """Scale drift: grid-searched shared vs per-loop clip on X_t = s_t R, R ~ N(0, 1).

    Scales are chosen on one sample set and the excess error is measured on an
    independent one; all loops share the base draw R (common random numbers),
    so equal scales give exactly zero excess.
    """
    scales = [float(s) for s in scales]
    if any(s <= 0 for s in scales):
        raise ContractError("loop scales must be positive (zero variance is degenerate)")
    rng = np.random.default_rng(seed)
    fit, ev = rng.standard_normal(n), rng.standard_normal(n)
    grid = clip_grid(scales, bits, points)
    fit_err = np.array([[_qerr(s * fit, c, bits).mean() for c in grid] for s in scales])
    c_loop = [float(grid[i]) for i in fit_err.argmin(axis=1)]
    c_shared = float(grid[fit_err.sum(axis=0).argmin()])
    err_opt, err_sh, excess, se = [], [], [], []
    for s, c_t in zip(scales, c_loop):
        e_sh = _qerr(s * ev, c_shared, bits)
        e_op = _qerr(s * ev, c_t, bits)
        diff = e_sh - e_op
        err_opt.append(float(e_op.mean()))
        err_sh.append(float(e_sh.mean()))
        excess.append(float(diff.mean()))
        se.append(float(diff.std(ddof=1) / np.sqrt(n)))
    k = int(np.argmax(excess))
    return Prop1Report(scales, bits, c_loop, c_shared, err_opt, err_sh, excess, se,
                       excess[k], se[k], n)


@dataclass
class CovarianceDriftReport:
    angles_deg: list[float]
    best_angle_per_loop: list[float]
    best_shared_angle: float
    err_per_loop_opt: list[float]
    err_eigen_aligned: list[float]
    err_shared: list[float]
    excess: float
    commute: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def verify_prop1_covariance(cov1: np.ndarray, cov2: np.ndarray, bits: int = 4,
                            n: int = 20_000, step_deg: float = 1.0, c_points: int = 40,
                            seed: int = 0) -> CovarianceDriftReport:
    """Covariance drift in 2-D: best shared rotation vs per-loop rotations.

    Each candidate rotation is scored with its own best clip (grid), so the
    comparison isolates geometry. Rotations by 90 degrees only permute and
    flip coordinates, so angles in [0, 90) cover all orthogonal transforms.
    """
    covs = [np.asarray(cov1, float), np.asarray(cov2, float)]
    for c in covs:
        if c.shape != (2, 2) or np.linalg.eigvalsh(c).min() <= 0:
            raise ContractError("covariances must be 2x2 positive definite")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, 2))
    xs = [z @ np.linalg.cholesky(c).T for c in covs]
    angles = np.arange(0.0, 90.0, step_deg)

    def best_err(x):
        m = np.abs(x).max()
        grid = np.geomspace(m / QuantSpec.qrange(bits)[1] / 20, m / QuantSpec.qrange(bits)[1],
                            c_points)
        return min(_qerr(x, c, bits).sum(axis=1).mean() for c in grid)

    table = np.array([[best_err(x @ _rot(np.deg2rad(a))) for a in angles] for x in xs])
    per_loop = table.min(axis=1)
    shared_idx = int(table.sum(axis=0).argmin())
    eig = [best_err(x @ np.linalg.eigh(c)[1]) for x, c in zip(xs, covs)]
    shared = table[:, shared_idx]
    return CovarianceDriftReport(
        angles.tolist(), [float(angles[i]) for i in table.argmin(axis=1)],
        float(angles[shared_idx]), per_loop.tolist(), [float(e) for e in eig],
        shared.tolist(), float(np.max(shared - per_loop)),
        bool(np.allclose(covs[0] @ covs[1], covs[1] @ covs[0])))


# ---------------------------------------------------------------------------
# drift statistics
# ---------------------------------------------------------------------------

@dataclass
class DriftStats:
    p99: np.ndarray            # (T, L + 1) P99 of |H_{t,l}|
    p99_norm: np.ndarray       # normalized by loop 0 of the same layer
    top_eig_cos: np.ndarray    # |cos| between top covariance eigenvector and loop 0's
    channel_energy: np.ndarray  # (T, L + 1, d) mean squared activation per channel

    def rows(self) -> list[dict]:
        T, L1 = self.p99.shape
        return [{"t": t, "layer": layer, "p99": float(self.p99[t, layer]),
                 "p99_norm": float(self.p99_norm[t, layer]),
                 "top_eig_cos": float(self.top_eig_cos[t, layer])}
                for t in range(T) for layer in range(L1)]


def drift_stats(model: LoopedModel, tokens: np.ndarray, T: int | None = None) -> DriftStats:
    traj = forward(model, tokens, record=True, T=T)
    T_, L1 = traj.T, traj.L + 1
    d = model.d
    p99 = np.zeros((T_, L1))
    energy = np.zeros((T_, L1, d))
    tops = np.zeros((T_, L1, d))
    for t in range(T_):
        for layer in range(L1):
            h = traj.states[t][layer].value.reshape(-1, d)
            p99[t, layer] = np.percentile(np.abs(h), 99)
            energy[t, layer] = (h * h).mean(axis=0)
            cov = np.cov(h, rowvar=False) if len(h) > 1 else np.outer(h[0], h[0])
            tops[t, layer] = np.linalg.eigh(np.atleast_2d(cov))[1][:, -1]
    base = np.where(p99[0] > 0, p99[0], 1.0)
    cos = np.abs(np.einsum("tld,ld->tl", tops, tops[0]))
    return DriftStats(p99, p99 / base, cos, energy)
