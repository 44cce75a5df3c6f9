import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arm_meter.cost import (
    ObsFormatError,
    Observation,
    PowerProfile,
    Predictor,
    anchor_intercept,
    carbon_estimate,
    energy_estimate,
    fit_per_model,
    fit_predictor,
    pearson,
    predict_epochs,
    read_observations,
    residual_sum_squares,
    write_observations,
)


def line_obs(model, slope, intercept, arms, kind="gaussian"):
    return [Observation(model, kind, i + 1, a, slope * a + intercept) for i, a in enumerate(arms)]


def test_exact_line():
    pred = fit_predictor(line_obs("a", 100, 50, [0.1, 0.2, 0.5, 0.9]))
    assert pred.slope == pytest.approx(100, abs=1e-9)
    assert pred.intercepts["a"] == pytest.approx(50, abs=1e-9)
    assert residual_sum_squares(pred, line_obs("a", 100, 50, [0.1, 0.2, 0.5, 0.9])) < 1e-18


def test_parallel_lines():
    obs = line_obs("a", 100, 50, [0.1, 0.3, 0.4]) + line_obs("b", 100, 80, [0.2, 0.25, 0.7, 0.8])
    pred = fit_predictor(obs)
    assert pred.slope == pytest.approx(100, abs=1e-9)
    assert pred.intercepts == pytest.approx({"a": 50, "b": 80}, abs=1e-9)
    assert pred.fitted_on == ["a", "b"]


def test_degenerate_design():
    with pytest.raises(ValueError, match="degenerate"):
        fit_predictor([Observation("a", "blur", 1, 0.3, 5), Observation("a", "blur", 2, 0.3, 7)])
    with pytest.raises(ValueError):
        fit_predictor([Observation("a", "blur", 1, 0.3, 5)])


def test_slope_recovery_over_seeds():
    arms = np.linspace(0.05, 0.6, 7)
    slopes = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        obs = []
        for model, intercept in (("a", 50), ("b", 80)):
            for i, a in enumerate(arms):
                obs.append(Observation(model, "gaussian", i + 1, a, 100 * a + intercept + rng.normal(0, 5)))
        slopes.append(fit_predictor(obs).slope)
    assert abs(np.mean(slopes) - 100) <= 10
    # spread agrees with the least-squares standard error sigma / sqrt(sum of within-model squares)
    se = 5 / np.sqrt(2 * np.sum((arms - arms.mean()) ** 2))
    assert 0.7 * se < np.std(slopes) < 1.3 * se


def test_per_model_fit():
    obs = line_obs("a", 10, 1, [0, 1, 2]) + line_obs("b", 20, 3, [0, 1, 2])
    fits = fit_per_model(obs)
    assert fits["a"].slope == pytest.approx(10) and fits["b"].slope == pytest.approx(20)
    assert fits["b"].intercepts["b"] == pytest.approx(3)


def test_fixed_effects_beat_single_intercept():
    rng = np.random.default_rng(0)
    obs = []
    for model, intercept in (("a", 5), ("b", 30), ("c", 12)):
        for i, a in enumerate(rng.random(6)):
            obs.append(Observation(model, "blur", i + 1, a, max(0.0, 40 * a + intercept + rng.normal(0, 3))))
    fe = residual_sum_squares(fit_predictor(obs), obs)
    pooled = fit_predictor([Observation("all", o.noise_kind, o.level, o.arm, o.epochs) for o in obs])
    single = Predictor(pooled.slope, {m: pooled.intercepts["all"] for m in "abc"})
    assert fe <= residual_sum_squares(single, obs)


def test_anchor_intercept():
    pred = Predictor(100.0, {"a": 50.0})
    anchored = anchor_intercept(pred, "new", Observation("new", "blur", 1, 1.0, 150))
    assert anchored.intercepts["new"] == 50 and anchored.slope == 100
    on_line = anchor_intercept(pred, "c", Observation("c", "blur", 1, 0.3, 80))
    assert on_line.intercepts["c"] == pytest.approx(50)
    probe = Observation("d", "blur", 1, 0.37, 91.5)
    assert predict_epochs(anchor_intercept(pred, "d", probe), "d", 0.37) == pytest.approx(91.5, abs=1e-12)
    with pytest.raises(ValueError):
        anchor_intercept(pred, "a", probe)
    assert anchor_intercept(pred, "a", probe, overwrite=True).intercepts["a"] == pytest.approx(54.5)


def test_predict_epochs():
    pred = Predictor(100.0, {"a": 50.0, "neg": -20.0})
    assert predict_epochs(pred, "a", 2) == 250
    assert predict_epochs(pred, "a", 0) == 50
    assert predict_epochs(pred, "neg", 0) == 0
    with pytest.raises(KeyError):
        predict_epochs(pred, "zzz", 1)


def test_leave_out_levels_within_noise_envelope():
    sigma = 5.0
    rng = np.random.default_rng(12)
    arms = np.linspace(0.1, 0.7, 7)
    obs = [
        Observation("m", "gaussian", lvl, a, 100 * a + 50 + rng.normal(0, sigma))
        for lvl, a in zip(range(1, 8), arms)
    ]
    pred = fit_predictor([o for o in obs if o.level in (1, 2, 6, 7)])
    for o in obs:
        if o.level in (3, 4, 5):
            assert abs(predict_epochs(pred, "m", o.arm) - o.epochs) <= 3 * sigma


def test_predictor_json_roundtrip(tmp_path):
    pred = Predictor(12.5, {"a": 1.0, "b": -2.0}, ["a", "b"])
    pred.save(tmp_path / "p.json")
    assert Predictor.load(tmp_path / "p.json") == pred
    with pytest.raises(ValueError):
        Predictor(float("nan"), {"a": 1.0})
    with pytest.raises(ValueError):
        Predictor(1.0, {})


# -- energy and carbon ------------------------------------------------------------


def test_energy_examples():
    profile = PowerProfile(100.0, 2.0, 400.0)
    assert energy_estimate(100, profile) == pytest.approx(0.005556, abs=1e-6)
    assert energy_estimate(0, profile) == 0
    assert energy_estimate(200, profile) == 2 * energy_estimate(100, profile)
    with pytest.raises(ValueError):
        energy_estimate(-1, profile)


def test_carbon_examples():
    assert carbon_estimate(1.0, PowerProfile(1, 1, 400.0)) == 400
    assert carbon_estimate(3.0, PowerProfile(1, 1, 0.0)) == 0
    with pytest.raises(ValueError):
        PowerProfile(0, 1, 1)
    with pytest.raises(ValueError):
        PowerProfile(1, 1, -1)


@settings(max_examples=100, deadline=None)
@given(epochs=st.floats(0, 1e4), k=st.integers(1, 50))
def test_energy_carbon_linear(epochs, k):
    profile = PowerProfile(65.0, 1.7, 233.0)
    kwh = energy_estimate(epochs, profile)
    assert kwh >= 0
    assert energy_estimate(k * epochs, profile) == pytest.approx(k * kwh, rel=1e-12, abs=1e-300)
    assert carbon_estimate(energy_estimate(k * epochs, profile), profile) == pytest.approx(
        k * carbon_estimate(kwh, profile), rel=1e-12, abs=1e-300
    )


# -- pearson ----------------------------------------------------------------------


def mp_pearson(xs, ys):
    """Same formulas at 50 digits; the tail probability by numerical integration of the t density."""
    with mpmath.workdps(50):
        x = [mpmath.mpf(v) for v in xs]
        y = [mpmath.mpf(v) for v in ys]
        n = len(x)
        mx, my = sum(x) / n, sum(y) / n
        sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
        sxx = sum((a - mx) ** 2 for a in x)
        syy = sum((b - my) ** 2 for b in y)
        r = sxy / mpmath.sqrt(sxx * syy)
        df = n - 2
        t = abs(r) * mpmath.sqrt(df / (1 - r * r))
        c = mpmath.gamma((df + 1) / mpmath.mpf(2)) / (mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / mpmath.mpf(2)))
        tail = mpmath.quad(lambda s: c * (1 + s * s / df) ** (-(df + 1) / mpmath.mpf(2)), [t, mpmath.inf])
        return float(r), float(2 * tail)


def test_pearson_exact_lines():
    xs = [1.0, 2.0, 3.5, 4.0, 7.0]
    r, p = pearson(xs, [2 * x + 1 for x in xs])
    assert r == 1.0 and p < 1e-12
    r, _ = pearson(xs, [-x for x in xs])
    assert r == -1.0


def test_pearson_reference_example():
    r, p = pearson([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
    rr, pp = mp_pearson([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
    assert r == pytest.approx(0.8, abs=1e-12)
    assert abs(r - rr) < 1e-9 and abs(p - pp) < 1e-9


def test_pearson_against_high_precision():
    rng = np.random.default_rng(0)
    for _ in range(100):
        xs = rng.standard_normal(10)
        ys = 0.7 * xs + rng.standard_normal(10)
        r, p = pearson(xs, ys)
        rr, pp = mp_pearson(xs, ys)
        assert abs(r - rr) < 1e-9 and abs(p - pp) < 1e-9


def test_pearson_errors():
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2])
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1, 2, 3], [1, 2])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 100), shift=st.floats(-100, 100))
def test_pearson_symmetric_and_affine_invariant(seed, scale, shift):
    rng = np.random.default_rng(seed)
    xs = rng.standard_normal(8)
    ys = xs + rng.standard_normal(8)
    r, _ = pearson(xs, ys)
    assert pearson(ys, xs)[0] == pytest.approx(r, abs=1e-12)
    assert pearson(scale * xs + shift, ys)[0] == pytest.approx(r, abs=1e-9)
    assert pearson(-scale * xs + shift, ys)[0] == pytest.approx(-r, abs=1e-9)


# -- obs.csv ------------------------------------------------------------------------


def test_observations_csv_roundtrip(tmp_path):
    obs = [
        Observation("toy-cnn-a", "gaussian", 1, 0.1 + 0.2, 3.0, 1e-5, 0.004),
        Observation("toy-mlp", "blur", 7, 0.0, 2 / 3),
    ]
    path = tmp_path / "obs.csv"
    write_observations(obs, path)
    assert path.read_text().splitlines()[0] == "model_id,noise_kind,level,arm,epochs,energy_kwh,co2_g"
    assert read_observations(path) == obs


def test_observations_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("")
    with pytest.raises(ObsFormatError, match="empty"):
        read_observations(path)
    path.write_text("model_id,level\n")
    with pytest.raises(ObsFormatError, match="missing"):
        read_observations(path)
    path.write_text("model_id,noise_kind,level,arm,epochs,energy_kwh,co2_g\na,blur,1,x,2,,\n")
    with pytest.raises(ObsFormatError, match=":2:"):
        read_observations(path)
    path.write_text("model_id,noise_kind,level,arm,epochs,energy_kwh,co2_g\na,blur,1,-1,2,,\n")
    with pytest.raises(ObsFormatError):
        read_observations(path)
