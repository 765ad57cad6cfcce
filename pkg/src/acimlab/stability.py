"""Invariant densities, the noise-level sweep, Lasota-Yorke envelopes, spectra.

Everything here works on the Ulam level: the deterministic density ``h`` and
the noisy densities ``h_delta`` are fixed points of matrices on the same
grid, so the sweep isolates the effect of the noise level.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import __version__
from .bvspace import default_r_grid, var_many, var_norm
from .errors import (
    ConvergenceError,
    NumericalError,
    ParameterError,
    SamplingError,
    StructuralError,
)
from .maps import PiecewiseMap
from .noise import NoiseKernel, noise_matrix, sample_noise
from .transfer import GridDensity, TransferMatrix, store, ulam_matrix

METHODS = ("power", "cesaro", "eigen")
STALL_RATIO = 0.999
STALL_COUNT = 50


@dataclass(frozen=True)
class SolveOptions:
    method: str = "power"
    tol: float = 1e-12
    max_iter: int = 100_000
    seed_density: Optional[GridDensity] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown solver method {self.method!r}")
        if not self.tol > 0:
            raise ParameterError("tol must be positive")
        if self.max_iter < 1:
            raise ParameterError("max_iter must be >= 1")


@dataclass(frozen=True)
class SolveResult:
    density: GridDensity
    iterations: int
    residual: float
    method: str


def _l1(v: np.ndarray) -> float:
    return float(np.abs(v).sum() / v.size)


def residual(M: TransferMatrix, h: GridDensity) -> float:
    """``||M h - h||_1`` in the grid L1 norm."""
    return _l1(M.matvec(h.values) - h.values)


def _seed(M: TransferMatrix, opts: SolveOptions) -> np.ndarray:
    if opts.seed_density is None:
        return np.ones(M.n)
    if opts.seed_density.n != M.n:
        raise StructuralError("seed density has the wrong grid size")
    f = np.array(opts.seed_density.values, dtype=float)
    return f / (f.sum() / M.n)


def cesaro_averages(M: TransferMatrix, f: GridDensity, k: int):
    """Yield ``(j, h_j)`` for ``j = 1..k`` with ``h_j = (1/j) sum_{i<j} M^i f``."""
    cur = np.array(f.values, dtype=float)
    acc = np.zeros_like(cur)
    for j in range(1, k + 1):
        acc += cur
        cur = M.matvec(cur)
        yield j, GridDensity(acc / j)


def _power(M, f, opts, budget):
    prev, stall = math.inf, 0
    for it in range(1, budget + 1):
        g = M.matvec(f)
        g /= g.sum() / g.size
        res = _l1(g - f)
        if res <= opts.tol:
            return f, it, res, False
        stall = stall + 1 if res > STALL_RATIO * prev else 0
        prev = res
        f = g
        if stall >= STALL_COUNT:
            return f, it, res, True
    return f, budget, prev, True


def _cesaro(M, f, opts, budget, start=0):
    # Restarted Cesaro: average a block of iterates, reseed with the average,
    # double the block length.  Mh - h = (M^L g - g) / L over a block.
    used, block, res = start, 16, math.inf
    while used < budget:
        L = min(block, budget - used)
        acc = np.zeros_like(f)
        cur = f
        for _ in range(L):
            acc += cur
            cur = M.matvec(cur)
        used += L
        h = acc / L
        res = _l1(cur - f) / L
        f = h / (h.sum() / h.size)
        if res <= opts.tol:
            return f, used, res
        block = min(2 * block, 4096)
    raise ConvergenceError(
        f"Cesaro iteration did not reach tol={opts.tol:g} in {budget} steps "
        f"(residual {res:.3e})",
        residual=res,
    )


def _eigen(M, f, opts):
    # Inverse iteration with shift just above 1: M is stochastic, so M - mu I
    # is invertible and the leading eigenvector dominates after a few solves.
    n = M.n
    mu = 1.0 + 1e-10
    if M.is_sparse:
        lu = spla.splu((M.entries - mu * sp.identity(n, format="csc")).tocsc())
        solve = lu.solve
    else:
        fac = scipy.linalg.lu_factor(M.dense() - mu * np.eye(n))
        solve = lambda b: scipy.linalg.lu_solve(fac, b)  # noqa: E731
    res = math.inf
    for it in range(1, min(opts.max_iter, 100) + 1):
        f = solve(f)
        f = f / (f.sum() / n)
        res = _l1(M.matvec(f) - f)
        if res <= opts.tol:
            break
    else:
        raise ConvergenceError(f"inverse iteration stalled at residual {res:.3e}", residual=res)
    neg = f < 0
    if np.any(neg):
        if np.min(f) < -opts.tol:
            raise NumericalError(f"leading eigenvector has a negative entry {np.min(f):.3e}")
        f = np.where(neg, 0.0, f)
        f = f / (f.sum() / n)
    return f, it, res


def solve_invariant(M: TransferMatrix, opts: SolveOptions = SolveOptions()) -> SolveResult:
    """Fixed point of a column-stochastic matrix, with iteration diagnostics.

    ``power`` falls back to Cesaro averaging when the residual stalls
    (successive ratio above 0.999 for 50 steps), e.g. for periodic chains.
    """
    f = _seed(M, opts)
    if opts.method == "eigen":
        h, it, res = _eigen(M, f, opts)
        return SolveResult(GridDensity(h), it, res, "eigen")
    if opts.method == "cesaro":
        h, it, res = _cesaro(M, f, opts, opts.max_iter)
        return SolveResult(GridDensity(h), it, res, "cesaro")
    h, it, res, stalled = _power(M, f, opts, opts.max_iter)
    if not stalled:
        return SolveResult(GridDensity(h), it, res, "power")
    if it >= opts.max_iter:
        raise ConvergenceError(
            f"power iteration did not reach tol={opts.tol:g} in {opts.max_iter} steps "
            f"(residual {res:.3e})",
            residual=res,
        )
    h, it, res = _cesaro(M, h, opts, opts.max_iter, start=it)
    return SolveResult(GridDensity(h), it, res, "power+cesaro")


def invariant_density(M: TransferMatrix, opts: SolveOptions = SolveOptions()) -> GridDensity:
    return solve_invariant(M, opts).density


def perturbed_operator(P: TransferMatrix, Q: TransferMatrix) -> TransferMatrix:
    """Noisy transfer matrix: the deterministic step followed by smoothing, ``Q @ P``."""
    if P.n != Q.n:
        raise StructuralError(f"size mismatch: P is {P.n}, Q is {Q.n}")
    if P.kind != "frobenius_perron" or Q.kind != "noise":
        raise StructuralError(f"expected (frobenius_perron, noise), got ({P.kind}, {Q.kind})")
    if Q.is_sparse and P.is_sparse:
        prod = (Q.entries @ P.entries).toarray()
    elif P.is_sparse:
        prod = np.asarray((P.entries.T @ Q.entries.T).T)
    else:
        prod = np.asarray(Q.entries @ P.entries)
    sums = prod.sum(axis=0)
    if np.max(np.abs(sums - 1)) > 1e-9:
        raise NumericalError(f"Q P is not column-stochastic (deviation {np.max(np.abs(sums - 1)):.3e})")
    return TransferMatrix(store(prod), "perturbed")


# --------------------------------------------------------------------------
# spectra


@dataclass(frozen=True)
class SpectralGap:
    lambda2_modulus: float
    eigenvalue_one_simple: bool
    leading: tuple = ()

    @property
    def gap(self) -> float:
        return 1.0 - self.lambda2_modulus


DENSE_EIG_MAX = 1024
EIG_MAX = 8192


def spectral_gap(M: TransferMatrix, k: int = 6) -> SpectralGap:
    """Modulus of the second eigenvalue and simplicity of the eigenvalue 1.

    Dense LAPACK for small matrices, ARPACK (largest magnitude) beyond that.
    """
    n = M.n
    if n > EIG_MAX:
        raise ParameterError(f"n = {n} exceeds the eigensolver budget {EIG_MAX}")
    try:
        if n <= DENSE_EIG_MAX:
            ev = np.linalg.eigvals(M.dense())
        else:
            A = M.entries if M.is_sparse else spla.aslinearoperator(np.asarray(M.entries))
            ev = spla.eigs(A, k=k, which="LM", return_eigenvectors=False, tol=1e-12, maxiter=20 * n)
    except (np.linalg.LinAlgError, spla.ArpackError, spla.ArpackNoConvergence) as exc:
        raise NumericalError(f"eigensolver failed: {exc}") from exc
    ev = ev[np.argsort(-np.abs(ev))]
    ones = int(np.sum(np.abs(ev - 1) < 1e-8))
    lam2 = float(np.abs(ev[1])) if ev.size > 1 else 0.0
    return SpectralGap(lam2, ones == 1, tuple(complex(v) for v in ev[: min(k, ev.size)]))


# --------------------------------------------------------------------------
# noise-level sweep


@dataclass(frozen=True)
class SweepRow:
    delta: float
    l1_error: float
    var_h_delta: float
    spectral_gap: float
    iterations: int


@dataclass
class SweepReport:
    rows: list
    n: int
    p: float
    map_id: str
    kernel_id: str
    provenance: dict = field(default_factory=dict)

    CSV_HEADER = ("delta", "l1_error", "var_h_delta", "spectral_gap", "iterations")

    def __post_init__(self):
        deltas = [r.delta for r in self.rows]
        if any(b >= a for a, b in zip(deltas, deltas[1:])):
            raise StructuralError("sweep deltas must be strictly decreasing")
        if any(r.l1_error < 0 for r in self.rows):
            raise StructuralError("negative l1_error")

    @property
    def l1_errors(self) -> np.ndarray:
        return np.array([r.l1_error for r in self.rows])

    @property
    def rate_exponent(self) -> float:
        """Least-squares slope of ``log l1_error`` against ``log delta`` (diagnostic)."""
        d = np.array([r.delta for r in self.rows])
        e = self.l1_errors
        ok = e > 0
        if ok.sum() < 2:
            return float("nan")
        return float(np.polyfit(np.log(d[ok]), np.log(e[ok]), 1)[0])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for r in self.rows:
            w.writerow(
                [format(r.delta, ".17g"), format(r.l1_error, ".17g"), format(r.var_h_delta, ".17g"),
                 format(r.spectral_gap, ".17g"), r.iterations]
            )
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "map": self.map_id,
            "kernel": self.kernel_id,
            "n": self.n,
            "p": self.p,
            "rows": [asdict(r) for r in self.rows],
            "rate_exponent": self.rate_exponent,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SweepReport":
        d = json.loads(text)
        return cls(
            rows=[SweepRow(**r) for r in d["rows"]],
            n=d["n"],
            p=d["p"],
            map_id=d["map"],
            kernel_id=d["kernel"],
            provenance=d.get("provenance", {}),
        )


def check_deltas(delta_list: Sequence[float]) -> list:
    deltas = [float(d) for d in delta_list]
    if not deltas:
        raise ParameterError("delta_list is empty")
    if any(not 0 < d < 0.25 for d in deltas):
        raise ParameterError("every delta must lie in (0, 1/4)")
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ParameterError("delta_list must be strictly decreasing")
    return deltas


def stability_sweep(
    tmap: PiecewiseMap,
    kernel_profile: str,
    delta_list: Sequence[float],
    n: int,
    p: float,
    opts: SolveOptions = SolveOptions(),
    r_grid=None,
    spectra: bool = True,
    workers: int = 1,
) -> SweepReport:
    """``||h_delta - h||_1`` and companions for each noise level in ``delta_list``."""
    deltas = check_deltas(delta_list)
    r_grid = default_r_grid(n) if r_grid is None else r_grid
    P = ulam_matrix(tmap, n)
    h = invariant_density(P, opts)

    def row(delta):
        Q = noise_matrix(NoiseKernel(kernel_profile, delta), n)
        Pd = perturbed_operator(P, Q)
        try:
            sol = solve_invariant(Pd, opts)
        except ConvergenceError as exc:
            raise ConvergenceError(f"delta={delta}: {exc}", residual=exc.residual, delta=delta) from exc
        gap = spectral_gap(Pd).gap if spectra else float("nan")
        return SweepRow(
            delta=delta,
            l1_error=float(np.abs(sol.density.values - h.values).sum() / n),
            var_h_delta=var_norm(sol.density, p, r_grid).var,
            spectral_gap=gap,
            iterations=sol.iterations,
        )

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(row, deltas))
    else:
        rows = [row(d) for d in deltas]
    return SweepReport(
        rows=rows, n=n, p=float(p), map_id=tmap.label, kernel_id=kernel_profile,
        provenance={"tool_version": __version__},
    )


# --------------------------------------------------------------------------
# Lasota-Yorke envelopes


@dataclass(frozen=True)
class LYEstimate:
    alpha_hat: float
    c_hat: float
    sample_count: int
    violated: bool
    max_excess: float = 0.0


def _cell_average_trig(n, k, phase):
    # exact cell averages of cos(2 pi k x + phase)
    left = np.arange(n) / n
    w = 2 * np.pi * k
    return (np.sin(w * (left + 1 / n) + phase) - np.sin(w * left + phase)) * n / w


def random_test_functions(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Rows of cell values cycling through three families.

    Signed step functions with 1 to 50 jumps, low-frequency trigonometric
    polynomials (degree <= 5), and nonnegative densities ``exp(trig)``
    normalised to unit mass.
    """
    out = np.empty((count, n))
    for i in range(count):
        family = i % 3
        if family == 0:
            jumps = int(rng.integers(1, 51))
            cuts = np.sort(rng.choice(np.arange(1, n), size=min(jumps, n - 1), replace=False))
            levels = rng.normal(size=cuts.size + 1)
            out[i] = np.repeat(levels, np.diff(np.concatenate(([0], cuts, [n]))))
        else:
            deg = int(rng.integers(1, 6))
            v = np.full(n, rng.normal())
            for k in range(1, deg + 1):
                v += rng.normal() / k * _cell_average_trig(n, k, rng.uniform(0, 2 * np.pi))
            if family == 2:
                v = np.exp(v)
                v /= v.sum() / n
            out[i] = v
    return out


def ly_samples(M: TransferMatrix, fs: np.ndarray, p: float, r_grid):
    """``(var(Mf), var(f), ||f||_1)`` for each row of ``fs``."""
    mf = np.asarray(M.entries @ fs.T).T
    return (
        var_many(mf, p, r_grid),
        var_many(fs, p, r_grid),
        np.abs(fs).sum(axis=1) / fs.shape[1],
    )


def fit_envelope(v1, v0, l1, num_c: int = 100):
    """Smallest ``alpha`` with ``v1 <= alpha v0 + C l1`` over a log grid of ``C``.

    ``C`` is capped at ten times the largest observed seminorm gain per unit
    L1 mass, ``max(v1 - v0, 0) / l1``, so a map that never increases the
    seminorm gets ``C = 0``.
    """
    v1, v0, l1 = map(np.asarray, (v1, v0, l1))
    if not np.any(v0 > 0):
        raise SamplingError("every test function has zero seminorm")
    live = v0 > 0
    c_max = 10 * float(np.max(np.maximum(v1 - v0, 0) / np.maximum(l1, 1e-300)))
    cands = np.concatenate(([0.0], np.geomspace(c_max * 1e-6, c_max, num_c))) if c_max > 0 else np.zeros(1)
    best = None
    for c in cands:
        if np.any(v1[~live] > c * l1[~live] + 1e-12):
            continue
        alpha = float(np.max(np.maximum((v1[live] - c * l1[live]) / v0[live], 0.0)))
        if best is None or alpha < best[0]:
            best = (alpha, float(c))
    if best is None:
        raise SamplingError("no feasible envelope on the C grid")
    return best


def envelope_excess(v1, v0, l1, alpha, c) -> float:
    """Largest amount by which a sample exceeds ``alpha v0 + c l1`` (<= 0 when valid)."""
    return float(np.max(np.asarray(v1) - alpha * np.asarray(v0) - c * np.asarray(l1)))


def ly_estimate(
    M: TransferMatrix,
    p: float,
    r_grid=None,
    num_test_functions: int = 60,
    rng: Optional[np.random.Generator] = None,
) -> LYEstimate:
    """Empirical Lasota-Yorke envelope ``var(Mf) <= alpha var(f) + C ||f||_1``."""
    if num_test_functions < 10:
        raise ParameterError("need at least 10 test functions")
    rng = np.random.default_rng() if rng is None else rng
    r_grid = default_r_grid(M.n) if r_grid is None else r_grid
    fs = random_test_functions(M.n, num_test_functions, rng)
    v1, v0, l1 = ly_samples(M, fs, p, r_grid)
    alpha, c = fit_envelope(v1, v0, l1)
    excess = envelope_excess(v1, v0, l1, alpha, c)
    return LYEstimate(alpha, c, num_test_functions, excess > 1e-8, excess)


# --------------------------------------------------------------------------
# Monte Carlo


def monte_carlo_density(
    tmap: PiecewiseMap,
    kernel: Optional[NoiseKernel],
    num_samples: int,
    n: int,
    rng: np.random.Generator,
    burn_in: int = 1000,
    chains: int = 100,
) -> GridDensity:
    """Histogram of noisy orbits ``x <- (tau(x) + delta xi) mod 1``, ``xi ~ q``.

    ``chains`` independent orbits are advanced in lock-step, each discarding
    ``burn_in`` steps; histograms are summed.  ``kernel=None`` gives the
    noiseless orbit.
    """
    if num_samples < 10_000:
        raise ParameterError("num_samples must be >= 10^4")
    chains = max(1, min(chains, num_samples))
    steps = -(-num_samples // chains)
    x = rng.uniform(0, 1, size=chains)
    counts = np.zeros(n, dtype=np.int64)
    for t in range(burn_in + steps):
        x = tmap(x)
        if kernel is not None:
            x = x + sample_noise(kernel, rng.uniform(0, 1, size=chains))
        x = np.mod(x, 1.0)
        if t >= burn_in:
            counts += np.bincount(np.minimum((x * n).astype(np.int64), n - 1), minlength=n)
    return GridDensity(counts * (n / counts.sum()))
