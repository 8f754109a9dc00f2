import pytest

from surroforge import tensor as T
from surroforge.gradcheck import check_gradients, jitter_params
from surroforge.models import ModelSpec, build
from surroforge.rng import CounterRNG
from surroforge.synth import generate_cohort

ACCEPTANCE_RESULTS = {}


@pytest.fixture(scope="session")
def cohort40():
    """Default synthetic cohort: 40 patients, master seed 7."""
    return generate_cohort(40, master_seed=7)


@pytest.fixture(scope="session")
def cohort10():
    return generate_cohort(10, master_seed=3)


@pytest.fixture
def acceptance():
    """Record one acceptance criterion outcome for the terminal summary."""
    def record(number, passed, detail):
        ACCEPTANCE_RESULTS[number] = (bool(passed), detail)
        print(f"[criterion {number}] {'PASS' if passed else 'FAIL'}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


# Reduced-size models for finite-difference checks: same topology, fewer channels.
GRADCHECK_SPECS = {
    "fc50": dict(kind="fully_connected", window_len=50, hidden_units=20),
    "unet1d-se": dict(kind="unet1d", window_len=200, base_channels=4, se_enabled=True, se_reduction=2),
    "unet2d": dict(kind="unet2d", window_len=256, base_channels=4),
}


def model_gradient_error(name, seed, batch=2, max_coords=6):
    """Worst reverse-mode vs finite-difference error on a jittered model.

    Every parameter tensor is checked at ``max_coords`` sampled coordinates.
    """
    spec = ModelSpec(**GRADCHECK_SPECS[name])
    rng = CounterRNG(seed)
    model = jitter_params(build(spec, seed), rng.child("jitter"))
    x = T.Tensor(rng.child("x").normal(batch * spec.window_len).reshape(batch, -1))
    y = T.Tensor(rng.child("y").normal(batch * spec.window_len).reshape(batch, -1))
    worst, _ = check_gradients(lambda: T.mse_loss(model(x), y), list(model.params.values()),
                               h=1e-5, max_coords=max_coords, rng=rng.child("coords"))
    return worst
