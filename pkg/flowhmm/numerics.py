"""
Numerical building blocks shared by every flowhmm module.

Matrices are plain C-contiguous ``float64`` numpy arrays. Log-domain arrays may hold ``-inf``;
everything else must be finite. Random streams are ``numpy.random.Generator`` objects backed
by the counter-based Philox bit generator so that a seed reproduces the same draws on every
platform, and independent per-class streams can be derived by seed splitting.
"""

from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp

from flowhmm.exceptions import DataError, NumericalError, ShapeError

FloatArray = npt.NDArray[np.float64]
RngStream = np.random.Generator

LOG_2PI = float(np.log(2.0 * np.pi))


def log_sum_exp(
    v: npt.ArrayLike, axis: Optional[Union[int, Tuple[int, ...]]] = None
) -> Union[float, FloatArray]:
    """
    Stable ``log(sum(exp(v)))`` with max-shift.

    Args:
        v: Log-domain values
        axis: Axis (or axes) to reduce; all entries when None

    Returns:
        Scalar for a full reduction, array otherwise. ``-inf`` iff every reduced entry is
        ``-inf``.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise DataError("log_sum_exp of an empty vector")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = logsumexp(arr, axis=axis)
    if axis is None:
        return float(out)
    return np.asarray(out, dtype=np.float64)


def matmul(a: npt.ArrayLike, b: npt.ArrayLike) -> FloatArray:
    """Matrix product with an explicit shape check."""
    left = np.atleast_2d(np.asarray(a, dtype=np.float64))
    right = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if left.shape[1] != right.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {left.shape} x {right.shape}")
    return np.ascontiguousarray(left @ right)


def std_normal_log_pdf(z: FloatArray) -> FloatArray:
    """Row-wise log density of the standard isotropic Gaussian."""
    z = np.atleast_2d(z)
    return np.asarray(-0.5 * np.sum(z * z, axis=1) - 0.5 * z.shape[1] * LOG_2PI)


# ---------------------------------------------------------------------------
# Random streams


def make_rng(seed: Union[int, np.random.SeedSequence]) -> RngStream:
    """Create a Philox-backed random stream."""
    return np.random.Generator(np.random.Philox(seed))


def derive_rng(seed: int, *keys: int) -> RngStream:
    """
    Derive an independent stream for a sub-task (e.g. one class) of a seeded run.

    The derived stream depends only on ``seed`` and ``keys``, never on scheduling.
    """
    return make_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys)))


def rng_state(rng: RngStream) -> Dict[str, Any]:
    """JSON-serializable snapshot of a stream's counters."""
    return _to_jsonable(rng.bit_generator.state)


def restore_rng(state: Mapping[str, Any]) -> RngStream:
    """Rebuild a stream from :func:`rng_state` output."""
    if state.get("bit_generator") != "Philox":
        raise DataError(f"Unsupported bit generator: {state.get('bit_generator')}")
    bit_generator = np.random.Philox()
    bit_generator.state = _from_jsonable(state)
    return np.random.Generator(bit_generator)


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return [int(x) for x in value.tolist()]
    if isinstance(value, np.integer):
        return int(value)
    return value


def _from_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _from_jsonable(v) for k, v in value.items()}
    if isinstance(value, list):
        return np.array(value, dtype=np.uint64)
    return value


# ---------------------------------------------------------------------------
# Finite differences


def grad_check(
    f: Callable[[FloatArray], float],
    p: npt.ArrayLike,
    analytic_grad: npt.ArrayLike,
    eps: float = 1e-5,
) -> float:
    """
    Compare an analytic gradient against central differences.

    Args:
        f: Scalar objective of a parameter vector
        p: Parameter vector
        analytic_grad: Gradient claimed for ``f`` at ``p``
        eps: Difference step

    Returns:
        ``max_i |numeric_i - analytic_i| / max(1, |numeric_i|)``. Errors are relative to the
        central-difference value, not to ``analytic_grad``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    point = np.array(p, dtype=np.float64).ravel()
    grad = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if grad.shape != point.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match parameters {point.shape}")

    worst = 0.0
    for i in range(point.size):
        shifted = point.copy()
        shifted[i] = point[i] + eps
        f_plus = float(f(shifted))
        shifted[i] = point[i] - eps
        f_minus = float(f(shifted))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericalError(f"Non-finite objective while differencing parameter index {i}")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, abs(numeric - grad[i]) / max(1.0, abs(numeric)))
    return worst


def numerical_jacobian(
    fn: Callable[[FloatArray], FloatArray], x: npt.ArrayLike, eps: float = 1e-6
) -> FloatArray:
    """Central-difference Jacobian ``J[i, j] = d fn(x)_i / d x_j``."""
    point = np.array(x, dtype=np.float64).ravel()
    columns = []
    for j in range(point.size):
        shifted = point.copy()
        shifted[j] = point[j] + eps
        upper = np.asarray(fn(shifted), dtype=np.float64).ravel()
        shifted[j] = point[j] - eps
        lower = np.asarray(fn(shifted), dtype=np.float64).ravel()
        columns.append((upper - lower) / (2.0 * eps))
    return np.stack(columns, axis=1)


def log_abs_det(matrix: npt.ArrayLike) -> float:
    """``log|det M|`` via LU-based slogdet."""
    _, value = np.linalg.slogdet(np.asarray(matrix, dtype=np.float64))
    return float(value)


# ---------------------------------------------------------------------------
# Named parameter sets


def flatten_params(
    params: Mapping[str, FloatArray], keys: Optional[Sequence[str]] = None
) -> FloatArray:
    """Concatenate named tensors (in ``keys`` order, default sorted) into one vector."""
    names = list(keys) if keys is not None else sorted(params)
    if not names:
        return np.zeros(0)
    return np.concatenate([np.asarray(params[name], dtype=np.float64).ravel() for name in names])


def unflatten_params(
    vector: npt.ArrayLike,
    template: Mapping[str, FloatArray],
    keys: Optional[Sequence[str]] = None,
) -> Dict[str, FloatArray]:
    """Inverse of :func:`flatten_params` using ``template`` shapes."""
    names = list(keys) if keys is not None else sorted(template)
    flat = np.asarray(vector, dtype=np.float64).ravel()
    out: Dict[str, FloatArray] = {}
    offset = 0
    for name in names:
        shape = np.shape(template[name])
        size = int(np.prod(shape)) if shape else 1
        out[name] = flat[offset : offset + size].reshape(shape).copy()
        offset += size
    if offset != flat.size:
        raise ShapeError(f"vector of length {flat.size} does not match template ({offset})")
    return out
