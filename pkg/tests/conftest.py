import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _seed_numpy_legacy():
    # some tests use the legacy global RNG for throwaway data
    np.random.seed(0)


def central_diff_grad(fn, array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Independent finite-difference gradient oracle.

    Perturbs one entry of ``array`` in place at a time and evaluates the
    scalar ``fn()``; never touches the reverse-mode machinery.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = fn()
        flat[i] = keep - h
        fm = fn()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-5,
                      loss_scale: float = 1.0, h: float = 1e-6):
    """Elementwise relative comparison against the FD oracle.

    Central differences carry rounding noise of about eps*|f|/(2h), so
    entries whose magnitude sits below the oracle's own resolution are
    compared absolutely instead of relatively.
    """
    analytic = np.asarray(analytic)
    noise = 4.0 * 2.3e-16 * max(1.0, abs(loss_scale)) / (2.0 * h)
    floor = max(1e-8, noise / rtol)
    mask = np.abs(numeric) > floor
    rel = np.abs(analytic - numeric) / np.where(mask, np.abs(numeric), 1.0)
    bad_rel = mask & (rel > rtol)
    bad_abs = ~mask & (np.abs(analytic - numeric) > floor)
    assert not bad_rel.any(), (
        f"max relative gradient error {rel[mask].max():.3e} > {rtol}"
    )
    assert not bad_abs.any(), "small-gradient entries disagree beyond the FD noise floor"
