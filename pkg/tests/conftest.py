import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from ddpclab.estimators import fit_pipeline
from ddpclab.lti_sim import DoubleIntegratorConfig, FeedbackLaw, make_double_integrator, simulate

RHO = TAU = 10
PD_GAIN = np.array([[-2.5, -3.0]])


@pytest.fixture(scope="session", autouse=True)
def _single_threaded_blas():
    # small LAPACK problems dominate; spinning BLAS threads only add overhead
    with threadpool_limits(limits=1):
        yield


def benchmark_system(noise_var=1e-4, dt=1.0):
    return make_double_integrator(DoubleIntegratorConfig(dt=dt, noise_var=noise_var))


def benchmark_data(mode, seed, t_steps=1000, noise_var=1e-4, dt=1.0, excitation=0.1):
    sys = benchmark_system(noise_var, dt)
    if mode == "open":
        law = FeedbackLaw.open_loop(excitation, m=1, q=2)
        burn = 0
    else:
        law = FeedbackLaw.closed_loop(PD_GAIN, excitation)
        burn = 200
    return simulate(sys, law, t_steps, seed=seed, burn_in=burn)


@pytest.fixture(scope="session")
def open_fit():
    data = benchmark_data("open", seed=101)
    return data, fit_pipeline(data, RHO, TAU)


@pytest.fixture(scope="session")
def closed_fit():
    data = benchmark_data("closed", seed=202)
    return data, fit_pipeline(data, RHO, TAU)


@pytest.fixture(scope="session")
def noise_free_closed_data():
    return benchmark_data("closed", seed=303, noise_var=0.0)
