"""One-class SVM with RBF kernel, trained by a pairwise (SMO) solver of the dual."""
import logging
import math
import os
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist
from sklearn.metrics.pairwise import rbf_kernel as pairwise_rbf

from common.errors import ConfigurationError, ConvergenceWarning, InputError
from common.settings import load_package_config
from detectors.scaling import AutoscaleParams, fit_autoscale

logger = logging.getLogger(__name__)

CONFIG = load_package_config(os.path.dirname(__file__))["ocsvm"]
FORMAT_VERSION = CONFIG["format_version"]


def rbf_kernel(x, y, gamma):
    """exp(-gamma * ||x - y||^2) for two vectors."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ConfigurationError(f"kernel arguments differ in dimension: {x.shape[0]} vs {y.shape[0]}")
    if not gamma > 0:
        raise ConfigurationError(f"gamma must be positive, got {gamma}")
    return float(pairwise_rbf(x.reshape(1, -1), y.reshape(1, -1), gamma=gamma)[0, 0])


def median_gamma(z, rows=None):
    """Median heuristic on the first rows: gamma = 1 / (2 * median pairwise distance^2)."""
    rows = rows or CONFIG["median_rows"]
    distances = pdist(z[:rows])
    distances = distances[distances > 0]
    if not len(distances):
        logger.warning("all sampled calibration rows coincide, falling back to gamma = 1")
        return 1.0
    median = float(np.median(distances))
    return 1.0 / (2.0 * median * median)


def stride_subsample(z, max_rows=None):
    max_rows = max_rows or CONFIG["max_rows"]
    if len(z) <= max_rows:
        return z
    step = math.ceil(len(z) / max_rows)
    logger.info(f"subsampling calibration with stride {step} ({len(z)} -> {len(z[::step])} rows)")
    return z[::step]


class KernelRows:
    """Kernel matrix columns computed on demand, kept in a bounded LRU cache."""

    def __init__(self, z, gamma, capacity=None):
        self.z = z
        self.gamma = gamma
        self.capacity = capacity or CONFIG["cache_rows"]
        self._rows = OrderedDict()

    def __getitem__(self, i):
        row = self._rows.get(i)
        if row is not None:
            self._rows.move_to_end(i)
            return row
        row = pairwise_rbf(self.z, self.z[i:i + 1], gamma=self.gamma)[:, 0]
        self._rows[i] = row
        if len(self._rows) > self.capacity:
            self._rows.popitem(last=False)
        return row


@dataclass
class SolverResult:
    alphas: np.ndarray
    gradient: np.ndarray
    iterations: int
    converged: bool
    kkt_violation: float
    objective_trace: list = field(default_factory=list)


def _violating_pair(alphas, gradient, upper):
    below = alphas < upper
    above = alphas > 0
    i = int(np.flatnonzero(below)[gradient[below].argmin()]) if below.any() else None
    j = int(np.flatnonzero(above)[gradient[above].argmax()]) if above.any() else None
    if i is None or j is None:
        return i, j, 0.0
    return i, j, float(gradient[j] - gradient[i])


def solve_dual(kernel, n, upper, tol, max_iter):
    """
    Minimize 1/2 a'Ka subject to 0 <= a_i <= upper and sum(a) = 1.

    Pairs are chosen as the maximal KKT violators. max_iter counts sweeps of n
    pair updates; iterations in the result counts the updates themselves.
    The objective is recorded after every sweep and at the end.
    """
    alphas = np.zeros(n)
    filled = min(int(math.floor(1.0 / upper + 1e-9)), n)
    alphas[:filled] = upper
    if filled < n:
        alphas[filled] = max(1.0 - filled * upper, 0.0)

    gradient = np.zeros(n)
    for k in np.flatnonzero(alphas):
        gradient += alphas[k] * kernel[k]
    trace = [0.5 * float(alphas @ gradient)]

    iterations, budget = 0, max_iter * n
    i, j, violation = _violating_pair(alphas, gradient, upper)
    while violation > tol and iterations < budget:
        k_i, k_j = kernel[i], kernel[j]
        curvature = k_i[i] + k_j[j] - 2.0 * k_i[j]
        to_upper, to_zero = upper - alphas[i], alphas[j]
        room = min(to_upper, to_zero)
        step = room if curvature <= 1e-12 else min(violation / curvature, room)
        # snap to the box bounds
        alphas[i] = upper if step >= to_upper else alphas[i] + step
        alphas[j] = 0.0 if step >= to_zero else alphas[j] - step
        gradient += step * (k_i - k_j)
        iterations += 1
        if iterations % n == 0:
            trace.append(0.5 * float(alphas @ gradient))
        i, j, violation = _violating_pair(alphas, gradient, upper)

    trace.append(0.5 * float(alphas @ gradient))
    return SolverResult(
        alphas=alphas,
        gradient=gradient,
        iterations=iterations,
        converged=violation <= tol,
        kkt_violation=max(violation, 0.0),
        objective_trace=trace,
    )


def _offset(alphas, gradient, upper):
    free = (alphas > 0) & (alphas < upper)
    if free.any():
        return float(gradient[free].mean())
    # no unbounded support vector: midpoint of the interval the KKT conditions allow
    at_upper = alphas >= upper
    at_zero = alphas <= 0
    low = gradient[at_upper].max() if at_upper.any() else gradient.min()
    high = gradient[at_zero].min() if at_zero.any() else gradient.max()
    return float((low + high) / 2.0)


@dataclass(frozen=True)
class OcsvmModel:
    scaling: AutoscaleParams
    support_vectors: np.ndarray
    alphas: np.ndarray
    rho: float
    gamma: float
    nu: float
    calibration_size: int
    iterations: int = 0
    converged: bool = True
    kkt_violation: float = 0.0
    objective_trace: tuple = ()

    @property
    def feature_names(self):
        return self.scaling.feature_names

    @property
    def upper_bound(self):
        return 1.0 / (self.nu * self.calibration_size)

    def to_dict(self):
        return {
            "detector": "ocsvm",
            "format_version": FORMAT_VERSION,
            "scaling": self.scaling.to_dict(),
            "gamma": self.gamma,
            "nu": self.nu,
            "rho": self.rho,
            "calibration_size": self.calibration_size,
            "support_vectors": self.support_vectors.tolist(),
            "alphas": self.alphas.tolist(),
            "solver": {
                "iterations": self.iterations,
                "converged": self.converged,
                "kkt_violation": self.kkt_violation,
                "objective_trace": list(self.objective_trace),
            },
        }

    @classmethod
    def from_dict(cls, payload):
        if payload.get("format_version") != FORMAT_VERSION:
            raise InputError(f"unsupported OCSVM model format {payload.get('format_version')}")
        scaling = AutoscaleParams.from_dict(payload["scaling"])
        solver = payload.get("solver", {})
        return cls(
            scaling=scaling,
            support_vectors=np.asarray(payload["support_vectors"], dtype=float).reshape(-1, scaling.n_features),
            alphas=np.asarray(payload["alphas"], dtype=float),
            rho=float(payload["rho"]),
            gamma=float(payload["gamma"]),
            nu=float(payload["nu"]),
            calibration_size=int(payload["calibration_size"]),
            iterations=int(solver.get("iterations", 0)),
            converged=bool(solver.get("converged", True)),
            kkt_violation=float(solver.get("kkt_violation", 0.0)),
            objective_trace=tuple(solver.get("objective_trace", ())),
        )


def fit_ocsvm(calibration, nu=None, gamma=None, tol=None, max_iter=None, scaling=None, max_rows=None):
    """
    Fit the one-class SVM of a calibration matrix.

    Args:
        calibration: ObservationMatrix of (ideally) normal windows
        nu: outlier-fraction bound in (0, 1]
        gamma: fixed RBF width; the median heuristic is used when None
        tol: maximal KKT violation accepted at convergence
        max_iter: budget in sweeps of N pair updates (10 * N sweeps by default)
        scaling: AutoscaleParams to reuse; fitted on calibration when None
        max_rows: stride-subsampling cap on the solved calibration size
    Returns:
        OcsvmModel; a ConvergenceWarning is emitted when the budget runs out
    """
    nu = CONFIG["nu"] if nu is None else nu
    tol = CONFIG["tol"] if tol is None else tol
    if not 0 < nu <= 1:
        raise ConfigurationError(f"nu must lie in (0, 1], got {nu}")

    scaling = scaling or fit_autoscale(calibration)
    scaling.check_features(calibration.feature_names)
    z = stride_subsample(scaling.transform(calibration.counts), max_rows)
    n = len(z)
    if nu * n < 1:
        raise ConfigurationError(f"infeasible box: nu * N = {nu * n:.3g} < 1")
    if gamma is None:
        gamma = median_gamma(z)
    elif not gamma > 0:
        raise ConfigurationError(f"gamma must be positive, got {gamma}")
    max_iter = CONFIG["max_iter_factor"] * n if max_iter is None else max_iter
    if max_iter < 1:
        raise ConfigurationError(f"max_iter must be at least one sweep, got {max_iter}")

    upper = 1.0 / (nu * n)
    result = solve_dual(KernelRows(z, gamma), n, upper, tol, max_iter)
    if not result.converged:
        message = (f"OCSVM solver stopped after {max_iter} sweeps ({result.iterations} updates) "
                   f"with KKT violation {result.kkt_violation:.3g} > {tol}")
        logger.warning(message)
        warnings.warn(message, ConvergenceWarning)

    rho = _offset(result.alphas, result.gradient, upper)
    support = result.alphas > 0
    logger.info(f"OCSVM fitted on {n} rows: gamma={gamma:.4g}, {int(support.sum())} support vectors, "
                f"{result.iterations} updates")
    return OcsvmModel(
        scaling=scaling,
        support_vectors=z[support],
        alphas=result.alphas[support],
        rho=rho,
        gamma=float(gamma),
        nu=float(nu),
        calibration_size=n,
        iterations=result.iterations,
        converged=result.converged,
        kkt_violation=result.kkt_violation,
        objective_trace=tuple(result.objective_trace),
    )


def decision_sums(model, z):
    """sum_i alpha_i k(sv_i, x) for every scaled row x."""
    chunk = CONFIG["score_chunk"]
    sums = np.empty(len(z))
    for begin in range(0, len(z), chunk):
        block = pairwise_rbf(z[begin:begin + chunk], model.support_vectors, gamma=model.gamma)
        sums[begin:begin + chunk] = block @ model.alphas
    return sums


def score_ocsvm(model, matrix):
    """rho - sum_i alpha_i k(sv_i, x); positive scores are anomalous."""
    model.scaling.check_features(matrix.feature_names)
    z = model.scaling.transform(matrix.counts)
    return model.rho - decision_sums(model, z)
