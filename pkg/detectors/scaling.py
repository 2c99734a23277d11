"""Autoscaling shared by both detectors and by the U-Squared diagnosis."""
import logging
from dataclasses import dataclass

import numpy as np

from common.errors import ConfigurationError, FeatureMismatchError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AutoscaleParams:
    """
    Per-feature mean and sample standard deviation of a reference set.

    Features with sigma 0 are listed in zero_sigma_features and scale to 0.
    """
    feature_names: tuple
    mu: np.ndarray
    sigma: np.ndarray
    zero_sigma_features: frozenset

    @property
    def n_features(self):
        return len(self.feature_names)

    @property
    def usable(self):
        return self.sigma > 0

    def check_features(self, names):
        names = tuple(names)
        if names == self.feature_names:
            return
        for position, (expected, got) in enumerate(zip(self.feature_names, names)):
            if expected != got:
                raise FeatureMismatchError(
                    f"feature {position} is {got!r}, the reference expects {expected!r}")
        raise FeatureMismatchError(
            f"matrix has {len(names)} features, the reference expects {len(self.feature_names)}")

    def transform(self, counts):
        counts = np.atleast_2d(np.asarray(counts, dtype=float))
        scaled = np.zeros_like(counts)
        usable = self.usable
        scaled[:, usable] = (counts[:, usable] - self.mu[usable]) / self.sigma[usable]
        return scaled

    def to_dict(self):
        return {
            "feature_names": list(self.feature_names),
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "zero_sigma_features": sorted(self.zero_sigma_features),
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            feature_names=tuple(payload["feature_names"]),
            mu=np.asarray(payload["mu"], dtype=float),
            sigma=np.asarray(payload["sigma"], dtype=float),
            zero_sigma_features=frozenset(payload["zero_sigma_features"]),
        )


def fit_autoscale(calibration):
    """
    Column means and sample standard deviations (divisor n - 1).

    Args:
        calibration: ObservationMatrix with at least two rows
    Returns:
        AutoscaleParams
    """
    counts = np.asarray(calibration.counts, dtype=float)
    if counts.shape[0] < 2:
        raise ConfigurationError(f"autoscaling needs at least 2 observations, got {counts.shape[0]}")
    mu = counts.mean(axis=0)
    sigma = counts.std(axis=0, ddof=1)
    constant = np.ptp(counts, axis=0) == 0
    sigma[constant] = 0.0
    zero = frozenset(name for name, flag in zip(calibration.feature_names, constant) if flag)
    if zero:
        logger.warning(f"{len(zero)} features have zero variance in the reference and scale to 0")
    return AutoscaleParams(
        feature_names=tuple(calibration.feature_names),
        mu=mu,
        sigma=sigma,
        zero_sigma_features=zero,
    )
