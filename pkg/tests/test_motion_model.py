import numpy as np
import pytest
from scipy import stats

from src.models import motion_model
from src.models.motion_model import (
    MIN_SAMPLES,
    NU_MAX,
    SCALE_FLOOR,
    MotionModel,
    StudentTMarginal,
    fit,
    fit_marginal,
    sample,
    sample_many,
)
from src.models.se3 import DOF_NAMES, Motion6DoF
from src.utils.errors import FormatError, InputError


def _model(nu=3.0, loc=0.0, scale=0.1):
    return MotionModel(tuple(StudentTMarginal(nu, loc, scale) for _ in DOF_NAMES))


@pytest.mark.parametrize("seed", range(5))
def test_fit_recovers_student_t(seed):
    x = np.random.default_rng(seed).standard_t(3.0, size=100_000) * 0.1
    m, report = fit_marginal(x)
    assert report.converged
    assert m.nu == pytest.approx(3.0, rel=0.1)
    assert abs(m.loc) < 0.01
    assert m.scale == pytest.approx(0.1, rel=0.1)


def test_fit_constant_samples_is_degenerate():
    X = np.tile([0.0, 0.0, 1.0, 0.0, 0.0, 0.0], (40, 1))
    X[:, 0] = np.linspace(-1, 1, 40)
    model = fit(X)
    tz = model["t_z"]
    assert tz.loc == 1.0
    assert tz.scale == SCALE_FLOOR
    assert tz.nu == NU_MAX
    assert model.fit_reports[2].degenerate


def test_fit_gaussian_samples():
    x = np.random.default_rng(3).normal(0.5, 0.2, size=100_000)
    m, report = fit_marginal(x)
    assert m.nu > 30
    assert m.loc == pytest.approx(np.mean(x), rel=0.05)
    assert m.scale == pytest.approx(np.std(x), rel=0.05)


def test_fit_needs_enough_samples():
    with pytest.raises(InputError):
        fit([Motion6DoF()] * (MIN_SAMPLES - 1))
    with pytest.raises(InputError):
        fit(np.zeros((50, 5)))


def test_sample_is_reproducible():
    model = _model()
    a = sample(model, np.random.default_rng(5))
    b = sample(model, np.random.default_rng(5))
    assert a == b


def test_sample_tiny_scale_returns_loc():
    model = MotionModel(tuple(StudentTMarginal(3.0, 0.25, 1e-300) for _ in DOF_NAMES))
    m = sample(model, np.random.default_rng(0))
    np.testing.assert_allclose(m.as_array(), 0.25)


def test_sample_median_matches_loc():
    model = _model(loc=0.3)
    draws = sample_many(model, np.random.default_rng(9), 100_000)
    # standard error of the median of t(3): 1 / (2 f(0) sqrt(n)) with f(0) = 0.3676 / scale
    se = 0.1 / (2 * 0.3676 * np.sqrt(100_000))
    assert np.all(np.abs(np.median(draws, axis=0) - 0.3) < 4 * se)


def test_truncation_bounds_are_respected():
    model = _model().with_bounds({"t_z": (-0.05, 0.05)})
    draws = sample_many(model, np.random.default_rng(1), 20_000)
    assert draws[:, 2].min() >= -0.05 and draws[:, 2].max() <= 0.05
    assert draws[:, 0].max() > 0.05


def test_bounds_must_contain_loc():
    with pytest.raises(InputError):
        StudentTMarginal(3.0, 0.0, 0.1, 0.1, 0.2)
    with pytest.raises(InputError):
        StudentTMarginal(3.0, 0.0, 0.1, -0.1, None)


def test_self_consistency():
    truth = MotionModel(
        (
            StudentTMarginal(4.0, 0.0, 0.02),
            StudentTMarginal(4.0, 0.0, 0.01),
            StudentTMarginal(5.0, 0.8, 0.1),
            StudentTMarginal(3.0, 0.0, 0.002),
            StudentTMarginal(3.0, 0.0, 0.01),
            StudentTMarginal(3.0, 0.0, 0.002),
        )
    )
    fitted = fit(sample_many(truth, np.random.default_rng(2), 100_000))
    for a, b in zip(truth.marginals, fitted.marginals):
        assert b.nu == pytest.approx(a.nu, rel=0.1)
        assert b.scale == pytest.approx(a.scale, rel=0.1)
        assert abs(b.loc - a.loc) < 0.1 * a.scale


def test_save_load_round_trip(tmp_path):
    model = _model(nu=3.123456789012345, loc=-0.1, scale=0.07).with_bounds({"alpha": (-0.5, 0.5)})
    path = tmp_path / "model.txt"
    motion_model.save(model, path)
    assert motion_model.load(path) == model


def test_numpy_scalar_parameters_serialise_as_plain_numbers():
    model = _model(nu=np.float64(4.5), loc=np.float64(0.25), scale=np.float32(0.5)).with_bounds(
        {"t_z": (np.float64(-1.0), np.float64(2.0))}
    )
    text = motion_model.dumps(model)
    assert "np." not in text
    assert motion_model.loads(text) == model


def test_load_hand_written_record(tmp_path):
    lines = [f"{d}.{p} = {v}" for d in DOF_NAMES for p, v in (("nu", 3), ("loc", 0), ("scale", 0.1))]
    path = tmp_path / "model.txt"
    path.write_text("\n".join(lines) + "\n")
    assert motion_model.load(path) == _model()


def test_load_missing_field_names_it(tmp_path):
    text = motion_model.dumps(_model()).replace("gamma.scale", "# gamma.scale")
    with pytest.raises(FormatError, match="gamma.scale"):
        motion_model.loads(text, "model.txt")


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        motion_model.load(tmp_path / "nope.txt")


def test_draws_are_independent_across_dofs():
    draws = sample_many(_model(nu=5.0), np.random.default_rng(4), 100_000)
    corr = np.corrcoef(draws, rowvar=False)
    assert np.max(np.abs(corr - np.eye(6))) < 0.02


def test_em_iterations_never_lower_the_likelihood():
    x = np.random.default_rng(8).standard_t(2.5, size=2000) * 0.05 + 0.3
    loc, scale, nu = 0.0, 1.0, 200.0
    ll = [float(np.sum(stats.t.logpdf(x, nu, loc=loc, scale=scale)))]
    for _ in range(60):
        loc, scale, nu = motion_model._em_step(x, loc, scale, nu)
        ll.append(float(np.sum(stats.t.logpdf(x, nu, loc=loc, scale=scale))))
    assert all(b >= a - 1e-9 * abs(a) for a, b in zip(ll, ll[1:]))
    assert ll[-1] > ll[0]


def test_fitted_nu_is_a_likelihood_stationary_point():
    x = np.random.default_rng(9).standard_t(4.0, size=20_000) * 0.2
    m, report = fit_marginal(x)
    assert report.converged and not report.nu_at_upper_bound

    def ll(nu):
        return float(np.sum(stats.t.logpdf(x, nu, loc=m.loc, scale=m.scale)))

    h = 1e-3 * m.nu
    slope = (ll(m.nu + h) - ll(m.nu - h)) / (2 * h)
    curvature = (ll(m.nu + h) - 2 * ll(m.nu) + ll(m.nu - h)) / h**2
    # Newton step to the nu optimum is a small fraction of nu
    assert abs(slope / curvature) < 0.02 * m.nu
