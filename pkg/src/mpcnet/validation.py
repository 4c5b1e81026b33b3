"""Input validation helpers shared by the estimators and the CLI."""

import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted as _sk_check_is_fitted

from .pointcloud import MultispectralPointCloud


def check_cloud(cloud, require_labels=False):
    if not isinstance(cloud, MultispectralPointCloud):
        raise TypeError(f"expected a MultispectralPointCloud, got {type(cloud).__name__}")
    if require_labels and not cloud.labeled.any():
        raise ValueError("cloud has no labeled points")
    return cloud


def check_samples(samples, cloud, name="samples"):
    idx = np.asarray(samples.indices)
    if idx.ndim != 2 or idx.shape[1] != samples.k:
        raise ValueError(f"{name}: indices must be n_samples x k")
    if idx.size and (idx.min() < 0 or idx.max() >= cloud.n_points):
        raise IndexError(f"{name}: point index out of range")
    return samples


def check_is_fitted(estimator, attributes):
    try:
        _sk_check_is_fitted(estimator, attributes)
    except NotFittedError:
        raise
    except TypeError:
        if not all(hasattr(estimator, a) for a in np.atleast_1d(attributes)):
            raise NotFittedError(f"{type(estimator).__name__} is not fitted yet") from None
