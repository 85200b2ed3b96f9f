import numpy as np
import pytest

from ipdsurv.data import BINARY, CONTINUOUS, CovariateSchema, Dataset, center_covariates
from ipdsurv.flexph import fit_flexph
from ipdsurv.simulate import ScenarioSpec, generate

# published study-level hazard ratios with 95% CIs (crude and approach C, 3 years)
STUDIES = ("Yhim", "Gilbert", "Koerber", "Mai", "Meulendijks", "Balermpas")
CRUDE = [(0.59, 0.16, 2.17), (0.14, 0.05, 0.37), (0.42, 0.16, 1.07), (0.63, 0.26, 1.49),
         (0.18, 0.07, 0.48), (0.79, 0.41, 1.53)]
APPROACH_C_3Y = [(0.78, 0.49, 1.25), (0.67, 0.52, 0.87), (0.84, 0.59, 1.19), (0.88, 0.61, 1.28),
                 (0.68, 0.47, 0.99), (1.02, 0.72, 1.45)]


def make_dataset(time, event, study=None, exposure=None, z=None, names=None, kinds=None, labels=None):
    n = len(time)
    study = np.zeros(n, int) if study is None else np.asarray(study)
    exposure = np.zeros(n, int) if exposure is None else np.asarray(exposure)
    z = np.zeros((n, 0)) if z is None else np.asarray(z, dtype=float).reshape(n, -1)
    p = z.shape[1]
    names = names or tuple(f"z{j}" for j in range(p))
    kinds = kinds or (CONTINUOUS,) * p
    k = int(study.max()) + 1
    labels = labels or tuple(f"S{s + 1}" for s in range(k))
    return Dataset([str(i) for i in range(n)], study, exposure, z, time, event,
                   CovariateSchema(tuple(names), tuple(kinds)), labels)


@pytest.fixture(scope="session")
def sim3():
    """Three-study Weibull scenario with confounding and covariate-driven censoring."""
    spec = ScenarioSpec(n=(250, 300, 200), shape=(1.0, 1.2, 0.9), scale=(40, 55, 35), beta=(0.6, 0.4),
                        psi=(-0.5, -0.2, -0.4), binary_prob=(0.3, 0.5, 0.6), z_mean=(-0.3, 0.0, 0.4),
                        confounding=0.5, censor_rate=0.01, censor_coef=(0.3, 0.0), tau=(60, 80, 70), seed=7)
    d, truth = generate(spec)
    return center_covariates(d), truth


@pytest.fixture(scope="session")
def sim3_model(sim3):
    return fit_flexph(sim3[0])


@pytest.fixture(scope="session")
def small100():
    spec = ScenarioSpec(n=(50, 50), beta=(0.5, 0.3), psi=(-0.4, 0.1), censor_rate=0.01, tau=(60, 60), seed=3)
    d, _ = generate(spec)
    return center_covariates(d)


__all__ = ["APPROACH_C_3Y", "BINARY", "CONTINUOUS", "CRUDE", "STUDIES", "make_dataset"]
