import json

import numpy as np
import pytest

from unpredctl import (
    CostSpec,
    HorizonError,
    ParameterError,
    Scenario,
    ShapeError,
    TimeVaryingLinearSystem,
    observe,
    scalar_benchmark,
    scenario_from_dict,
    scenario_to_dict,
    step,
    validate,
)


def test_step_benchmark_first_step():
    sysm = TimeVaryingLinearSystem.constant([[1.2]], [[0.2]], N=50)
    assert step(sysm, [20.0], [0.0], 0) == pytest.approx([24.0])


def test_step_identity_dynamics():
    sysm = TimeVaryingLinearSystem.constant(np.eye(3), np.zeros((3, 2)), N=4, q=2)
    v = np.array([1.0, -2.0, 3.5])
    np.testing.assert_array_equal(step(sysm, v, [7.0, -1.0], 2), v)


def test_step_arithmetic():
    sysm = TimeVaryingLinearSystem.constant([[1.2]], [[0.2]], N=3)
    assert step(sysm, [2.0], [-1.0], 1) == pytest.approx([2.2])


def test_step_errors():
    sysm = TimeVaryingLinearSystem.constant([[1.2]], [[0.2]], N=3)
    with pytest.raises(HorizonError):
        step(sysm, [1.0], [0.0], 3)
    with pytest.raises(HorizonError):
        step(sysm, [1.0], [0.0], -1)
    with pytest.raises(ShapeError):
        step(sysm, [1.0, 2.0], [0.0], 0)


@pytest.mark.parametrize(
    "n, q, x, expected",
    [(2, 1, [3, 5], [3]), (1, 1, [20], [20]), (3, 2, [1, 2, 3], [1, 2])],
)
def test_observe_block_identity(n, q, x, expected):
    sysm = TimeVaryingLinearSystem.constant(np.eye(n), np.ones((n, 1)), N=1, q=q)
    np.testing.assert_array_equal(observe(sysm, x), expected)
    np.testing.assert_array_equal(sysm.C @ np.asarray(x, float), expected)


def test_observe_after_step_is_measurement_model():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    sysm = TimeVaryingLinearSystem.constant(A, B, N=2, q=2)
    x, u = rng.normal(size=3), rng.normal(size=2)
    np.testing.assert_allclose(
        observe(sysm, step(sysm, x, u, 0)), sysm.C @ A @ x + sysm.C @ B @ u, rtol=1e-14
    )


def test_benchmark_validates():
    assert validate(scalar_benchmark()).ok


def test_validate_r_not_pd():
    s = scalar_benchmark(N=3)
    R = np.array(s.cost.R_seq)
    R[0] = 0.0
    report = validate(s.with_cost(R_seq=R))
    assert not report.ok
    assert "R_0 not positive definite" in report.violations


def test_validate_lambda1_negative():
    report = validate(scalar_benchmark().with_cost(lambda1=-1))
    assert "lambda1 must be positive" in report.violations


def test_validate_collects_several():
    s = scalar_benchmark(N=2).with_cost(lambda2=0.0, lambda3_seq=np.array([-1.0, 0.0]))
    s = s.replace(x0=np.array([1.0, 2.0]), tau=2.0)
    v = validate(s).violations
    assert "lambda2 must be positive" in v
    assert "lambda3_0 must be nonnegative" in v
    assert any(msg.startswith("x0 has shape") for msg in v)
    assert "tau must lie in [0, 1]" in v


def test_validate_psd_tolerance():
    s = scalar_benchmark(N=1)
    assert validate(s.with_cost(H=np.array([[-1e-12]]))).ok
    assert not validate(s.with_cost(H=np.array([[-1e-8]]))).ok


def test_validate_input_bound_positive():
    s = scalar_benchmark(N=2, input_bound=4.0)
    assert validate(s).ok
    assert "input_bound must be strictly positive" in validate(
        s.replace(input_bound=np.array([0.0]))
    ).violations


def test_scalar_benchmark_dt_convention():
    s = scalar_benchmark(20, 10, 50, 5, 1, 0.5, "dt")
    assert s.dt == pytest.approx(0.2)
    assert np.allclose(s.system.A_seq, 1.2)
    assert np.allclose(s.system.B_seq, 0.2)
    assert np.allclose(s.cost.R_seq, 0.2)
    assert np.all(s.cost.Q_seq == 0) and s.cost.H[0, 0] == 1 and s.cost.x_target[0] == 0


def test_scalar_benchmark_one_convention():
    s = scalar_benchmark(20, 10, 50, 1, 1, 0, "one")
    assert np.all(s.system.B_seq == 1.0)
    assert np.all(s.cost.lambda3_seq == 0.0)


def test_scalar_benchmark_single_step():
    s = scalar_benchmark(N=1, T=1)
    assert s.N == 1 and s.dt == 1.0


@pytest.mark.parametrize("kw", [{"N": 0}, {"T": 0.0}, {"T": -1.0}, {"b_convention": "half"}])
def test_scalar_benchmark_rejects(kw):
    with pytest.raises(ParameterError):
        scalar_benchmark(**kw)


def test_containers_are_read_only():
    s = scalar_benchmark(N=2)
    with pytest.raises(ValueError):
        s.system.A_seq[0, 0, 0] = 3.0
    with pytest.raises(Exception):
        s.tau = 0.5


def test_scenario_json_roundtrip():
    rng = np.random.default_rng(0)
    N, n, m = 4, 3, 2
    sysm = TimeVaryingLinearSystem(rng.normal(size=(N, n, n)), rng.normal(size=(N, n, m)), q=2)
    cost = CostSpec(
        H=np.eye(n),
        Q_seq=np.stack([np.eye(n) * (k + 1) for k in range(N)]),
        R_seq=np.stack([np.eye(m)] * N),
        lambda1=2.0,
        lambda2=0.5,
        lambda3_seq=np.arange(N, dtype=float),
        x_target=rng.normal(size=n),
    )
    s = Scenario(sysm, cost, rng.normal(size=n), T=3.0, input_bound=np.array([1.0, 2.0]), tau=0.5)
    d = json.loads(json.dumps(scenario_to_dict(s)))
    s2 = scenario_from_dict(d)
    np.testing.assert_array_equal(s2.system.A_seq, s.system.A_seq)
    np.testing.assert_array_equal(s2.cost.Q_seq, s.cost.Q_seq)
    np.testing.assert_array_equal(s2.cost.lambda3_seq, s.cost.lambda3_seq)
    np.testing.assert_array_equal(s2.input_bound, s.input_bound)
    assert s2.tau == 0.5 and s2.system.q == 2 and s2.T == 3.0


def test_scenario_json_constant_form():
    d = {
        "n": 1, "m": 1, "q": 1, "N": 5, "T": 1.0, "constant": True,
        "A_seq": [[1.2]], "B_seq": [[0.2]], "H": [[1]],
        "Q_seq": [[0]], "R_seq": [[0.2]], "lambda1": 5, "lambda2": 1,
        "lambda3_seq": 0.5, "x0": [20], "x_target": [0],
    }  # fmt: skip
    s = scenario_from_dict(d)
    assert s.N == 5 and s.system.A_seq.shape == (5, 1, 1)
    assert validate(s).ok
    assert scenario_to_dict(s)["constant"] is True

    d["A_seq"] = {"constant": True, "value": [[1.1]]}
    assert np.all(scenario_from_dict(d).system.A_seq == 1.1)
    d["A_seq"] = {"constant": True, "value": [[[1.1]]] * 5}
    with pytest.raises(ShapeError):
        scenario_from_dict(d)


def test_scenario_json_errors():
    d = scenario_to_dict(scalar_benchmark(N=3))
    del d["H"]
    with pytest.raises(ParameterError):
        scenario_from_dict(d)
    d = scenario_to_dict(scalar_benchmark(N=3))
    d["A_seq"] = [[[1.0]]] * 2  # wrong length, not constant
    d.pop("constant")
    with pytest.raises(ShapeError):
        scenario_from_dict(d)
    d = scenario_to_dict(scalar_benchmark(N=3))
    d["C"] = [[0.5]]
    with pytest.raises(ShapeError):
        scenario_from_dict(d)
