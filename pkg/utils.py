import numpy as np


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """
    Norm-wise relative error ||a - n|| / (||a|| + ||n||); 0 when both vanish.
    """
    analytic = np.ravel(np.asarray(analytic, dtype=np.float64))
    numeric = np.ravel(np.asarray(numeric, dtype=np.float64))
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def epoch_seed(seed: int, epoch: int) -> int:
    """Derive the batch-plan seed of an epoch from the run seed"""
    return int(np.random.SeedSequence([int(seed), int(epoch)]).generate_state(1)[0])


def central_difference(f, theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """
    Central finite-difference gradient of a scalar function at theta.
    theta is perturbed in place and restored.
    """
    grad = np.zeros_like(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    flat_grad = grad.reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + step
        f_plus = f()
        flat[k] = original - step
        f_minus = f()
        flat[k] = original
        flat_grad[k] = (f_plus - f_minus) / (2 * step)
    return grad
