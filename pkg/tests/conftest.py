import numpy as np
import pytest

from doacal import ArrayGeometry, BlockCovariance, Scenario, build_default_cov


@pytest.fixture
def geom_ref() -> ArrayGeometry:
    """The reference sparse array: subarrays of 4/3/2 sensors, gaps 3 and 3.5 wl."""
    return ArrayGeometry.from_subarrays((4, 3, 2), 0.5, (3.0, 3.5))


@pytest.fixture
def ref_cov() -> BlockCovariance:
    return build_default_cov((4, 3, 2), (1.0, 1.5, 2.0), 0.5 + 0.35j)


def random_scenario(geom, rng, n=64, p=1, q=1, amp_known=10.0, cov_scale=1.0,
                    rho=0.5 + 0.35j, theta_known=(7.0,), theta_unknown=(15.0,)):
    """Scenario with unit-modulus random-phase signals and random gains."""
    powers = 0.5 + rng.uniform(0.0, 1.5, len(geom.subarray_sizes))
    cov = build_default_cov(geom.subarray_sizes, powers, rho).scaled(cov_scale)
    gains = np.maximum(rng.uniform(0, 1, geom.n_sensors), 0.05) * np.exp(
        2j * np.pi * rng.uniform(size=geom.n_sensors)
    )
    s_k = amp_known * np.exp(2j * np.pi * rng.uniform(size=(p, n)))
    s_u = np.exp(2j * np.pi * rng.uniform(size=(q, n)))
    return Scenario(
        geometry=geom,
        theta_known=tuple(np.radians(theta_known[:p])),
        theta_unknown=tuple(np.radians(theta_unknown[:q])),
        signals_known=s_k,
        signals_unknown=s_u,
        gains=gains,
        covariance=cov,
    )
