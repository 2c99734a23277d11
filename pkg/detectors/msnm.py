"""PCA-based multivariate statistical network monitoring: D and Q statistics with percentile limits."""
import logging
import os
from dataclasses import dataclass

import numpy as np

from common.errors import ConfigurationError, InputError, NumericalError
from common.settings import load_package_config
from detectors.scaling import AutoscaleParams, fit_autoscale

logger = logging.getLogger(__name__)

CONFIG = load_package_config(os.path.dirname(__file__))["msnm"]
FORMAT_VERSION = CONFIG["format_version"]


@dataclass(frozen=True)
class MsnmModel:
    scaling: AutoscaleParams
    loadings: np.ndarray
    eigenvalues: np.ndarray
    ucl_d: float
    ucl_q: float
    calibration_size: int

    @property
    def n_components(self):
        return self.loadings.shape[1]

    @property
    def feature_names(self):
        return self.scaling.feature_names

    def to_dict(self):
        return {
            "detector": "msnm",
            "format_version": FORMAT_VERSION,
            "scaling": self.scaling.to_dict(),
            "loadings": self.loadings.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "n_components": self.n_components,
            "ucl_d": self.ucl_d,
            "ucl_q": self.ucl_q,
            "calibration_size": self.calibration_size,
        }

    @classmethod
    def from_dict(cls, payload):
        if payload.get("format_version") != FORMAT_VERSION:
            raise InputError(f"unsupported MSNM model format {payload.get('format_version')}")
        scaling = AutoscaleParams.from_dict(payload["scaling"])
        loadings = np.asarray(payload["loadings"], dtype=float).reshape(scaling.n_features, payload["n_components"])
        return cls(
            scaling=scaling,
            loadings=loadings,
            eigenvalues=np.asarray(payload["eigenvalues"], dtype=float),
            ucl_d=float(payload["ucl_d"]),
            ucl_q=float(payload["ucl_q"]),
            calibration_size=int(payload["calibration_size"]),
        )


@dataclass(frozen=True)
class MsnmScores:
    d_stat: np.ndarray
    q_stat: np.ndarray
    score: np.ndarray


def _fix_signs(vectors):
    """Make the largest-magnitude entry of every column positive."""
    peaks = np.abs(vectors).argmax(axis=0)
    signs = np.sign(vectors[peaks, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _choose_components(eigenvalues, n_components, variance_fraction, limit):
    if n_components is not None:
        if not 1 <= n_components <= limit:
            raise ConfigurationError(f"n_components must lie in [1, {limit}], got {n_components}")
        return n_components
    if not 0 < variance_fraction <= 1:
        raise ConfigurationError(f"variance fraction must lie in (0, 1], got {variance_fraction}")
    explained = np.cumsum(eigenvalues) / eigenvalues.sum()
    chosen = int(np.searchsorted(explained, variance_fraction - 1e-12) + 1)
    return min(chosen, limit)


def _statistics(z, loadings, eigenvalues):
    t = z @ loadings
    d_stat = np.sum(t ** 2 / eigenvalues, axis=1)
    residual = z - t @ loadings.T
    q_stat = np.sum(residual ** 2, axis=1)
    return d_stat, q_stat


def fit_msnm(calibration, n_components=None, variance_fraction=None, limit_percentile=None, scaling=None):
    """
    Fit the PCA model of a calibration matrix.

    Args:
        calibration: ObservationMatrix of (ideally) normal windows
        n_components: fixed A; when None the smallest A reaching variance_fraction is used
        variance_fraction: cumulative eigenvalue fraction (tau)
        limit_percentile: percentile of calibration D and Q taken as control limits
        scaling: AutoscaleParams to reuse; fitted on calibration when None
    Returns:
        MsnmModel
    """
    variance_fraction = CONFIG["variance_fraction"] if variance_fraction is None else variance_fraction
    limit_percentile = CONFIG["limit_percentile"] if limit_percentile is None else limit_percentile
    n, p = calibration.counts.shape
    if n < 3:
        raise ConfigurationError(f"MSNM needs at least 3 calibration observations, got {n}")

    scaling = scaling or fit_autoscale(calibration)
    scaling.check_features(calibration.feature_names)
    if int(scaling.usable.sum()) < 2:
        raise NumericalError("degenerate covariance: fewer than 2 non-constant features in calibration")

    z = scaling.transform(calibration.counts)
    covariance = z.T @ z / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    eigenvectors = _fix_signs(eigenvectors[:, order])
    if eigenvalues[0] <= 0:
        raise NumericalError("degenerate covariance: no variance left after autoscaling")

    positive = int(np.sum(eigenvalues > eigenvalues[0] * 1e-12))
    limit = min(p, n - 1, positive)
    a = _choose_components(eigenvalues, n_components, variance_fraction, limit)
    loadings = eigenvectors[:, :a]
    retained = eigenvalues[:a]

    d_stat, q_stat = _statistics(z, loadings, retained)
    floor = CONFIG["ucl_floor"]
    ucl_d = max(float(np.percentile(d_stat, limit_percentile)), floor)
    ucl_q = max(float(np.percentile(q_stat, limit_percentile)), floor)
    logger.info(f"MSNM fitted on {n} x {p}: A={a}, ucl_d={ucl_d:.4g}, ucl_q={ucl_q:.4g}")
    return MsnmModel(
        scaling=scaling,
        loadings=loadings,
        eigenvalues=retained,
        ucl_d=ucl_d,
        ucl_q=ucl_q,
        calibration_size=n,
    )


def score_msnm(model, matrix):
    """D, Q and the combined score D/ucl_d + Q/ucl_q for every window of the matrix."""
    model.scaling.check_features(matrix.feature_names)
    z = model.scaling.transform(matrix.counts)
    d_stat, q_stat = _statistics(z, model.loadings, model.eigenvalues)
    return MsnmScores(d_stat=d_stat, q_stat=q_stat, score=d_stat / model.ucl_d + q_stat / model.ucl_q)
