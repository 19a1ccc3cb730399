import numpy as np
import pytest

from warpnode import tensor as T
from warpnode.ode import (ConstantVelocity, LinearVelocity, Trajectory, WarpField, integrate,
                          invertibility_residual, steps_for, trajectory, warp_at)
from warpnode.tensor import NonFiniteError, Tensor
from warpnode.warp import identity_grid

A = np.array([[0.3, -1.0], [0.8, -0.2]])
CENTER = np.array([3.5, 3.5])
X0 = np.zeros((8, 8, 1))


def expm(a: np.ndarray) -> np.ndarray:
    """Scaling and squaring with a Taylor core."""
    norm = np.abs(a).sum(axis=1).max()
    s = max(0, int(np.ceil(np.log2(norm))) + 4) if norm > 0 else 0
    b = a / 2 ** s
    out = np.eye(len(a))
    term = np.eye(len(a))
    for k in range(1, 30):
        term = term @ b / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def exact_linear_disp(a, t, h=8, w=8, center=CENTER):
    grid = identity_grid(h, w)
    mapped = center + (grid - center) @ expm(t * a).T
    return mapped - grid


def linear_error(method, steps, a=A):
    phi = integrate(LinearVelocity(a, CENTER), X0, 1.0, steps, method).data
    return np.abs(phi - exact_linear_disp(a, 1.0)).max()


def test_expm_oracle_sanity():
    theta = 0.7
    rot = np.array([[0, -theta], [theta, 0]])
    expected = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    assert np.allclose(expm(rot), expected, atol=1e-14)
    assert np.allclose(expm(np.diag([1.0, -2.0])), np.diag(np.exp([1.0, -2.0])), atol=1e-13)


@pytest.mark.parametrize("method", ["euler", "rk4"])
def test_zero_velocity_gives_identity(method):
    for t in (1.0, -0.4, 0.3):
        phi = integrate(ConstantVelocity([0.0, 0.0]), X0, t, 5, method).data
        assert np.array_equal(phi, np.zeros((8, 8, 2)))


@pytest.mark.parametrize("method", ["euler", "rk4"])
def test_constant_velocity_exact(method):
    c = np.array([0.5, -1.25])
    for t, steps in ((1.0, 4), (0.5, 2), (-1.0, 8), (0.25, 1)):
        phi = integrate(ConstantVelocity(c), X0, t, steps, method).data
        assert np.array_equal(phi, np.broadcast_to(t * c, phi.shape))


def test_linear_field_rk4_16_steps():
    assert linear_error("rk4", 16) < 1e-6


def test_rk4_order_ratio():
    ratio = linear_error("rk4", 4) / linear_error("rk4", 8)
    assert 12 <= ratio <= 20


def test_euler_order_ratio():
    ratio = linear_error("euler", 32) / linear_error("euler", 64)
    assert 1.7 <= ratio <= 2.3


def test_backward_integration_is_negative_time():
    phi = integrate(LinearVelocity(A, CENTER), X0, -1.0, 32, "rk4").data
    assert np.abs(phi - exact_linear_disp(A, -1.0)).max() < 1e-6


def test_integrate_preconditions():
    v = ConstantVelocity([0.0, 0.0])
    with pytest.raises(ValueError):
        integrate(v, X0, 1.0, 0)
    with pytest.raises(ValueError):
        integrate(v, X0, 1.5, 4)
    with pytest.raises(ValueError):
        integrate(v, X0, 1.0, 4, "midpoint")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_aborts_with_step_index():
    class Exploding:
        def __call__(self, phi, x0):
            return T.mul(T.add(phi, 1.0), 1e300)

    with pytest.raises(NonFiniteError, match="step 2/"):
        integrate(Exploding(), X0, 1.0, 4, "euler")


def test_integration_is_differentiable():
    def f(a):
        v = lambda phi, x0: T.reshape(T.matmul(T.reshape(T.add(phi, identity_grid(8, 8) - CENTER),
                                                         (-1, 2)), T.transpose(a)), phi.shape)
        return T.sum(T.mul(integrate(v, X0, 1.0, 3, "rk4"), 0.1))
    assert T.grad_check(f, A) < 1e-4


# -- trajectory ------------------------------------------------------------------

def test_trajectory_single_identity():
    tr = trajectory(ConstantVelocity([1.0, 0.0]), X0, [0.0])
    assert tr.times == [0.0]
    assert np.array_equal(tr.fields[0].data, np.zeros((8, 8, 2)))


def test_trajectory_constant_field():
    c = np.array([1.0, -0.5])
    tr = trajectory(ConstantVelocity(c), X0, [0.0, 0.5, 1.0], steps_per_unit=4)
    for t, f in zip(tr.times, tr.fields):
        assert np.array_equal(f.data, np.broadcast_to(t * c, (8, 8, 2)))


def test_trajectory_endpoint_matches_one_shot():
    v = LinearVelocity(A, CENTER)
    tr = trajectory(v, X0, [0.0, 1.0], steps_per_unit=8)
    one = integrate(v, X0, 1.0, 8)
    assert np.array_equal(tr.at(1.0).data, one.data)


def test_group_property_half_then_rest():
    v = LinearVelocity(A, CENTER)
    tr = trajectory(v, X0, [0.0, 0.5, 1.0], steps_per_unit=8)
    one = integrate(v, X0, 1.0, 8)
    assert np.array_equal(tr.at(1.0).data, one.data)


def test_trajectory_both_directions():
    v = LinearVelocity(A, CENTER)
    tr = trajectory(v, X0, [-1.0, -0.5, 0.0, 0.5, 1.0], steps_per_unit=16)
    assert tr.times == [-1.0, -0.5, 0.0, 0.5, 1.0]
    assert np.array_equal(tr.at(-1.0).data, integrate(v, X0, -1.0, 16).data)
    assert np.array_equal(tr.at(0.0).data, np.zeros((8, 8, 2)))


def test_trajectory_rejects_unsorted_or_out_of_range():
    v = ConstantVelocity([0.0, 0.0])
    with pytest.raises(ValueError):
        trajectory(v, X0, [0.5, 0.0])
    with pytest.raises(ValueError):
        trajectory(v, X0, [0.0, 1.5])


def test_steps_for_ceil_minimum_one():
    assert steps_for(0.3, 10) == 3
    assert steps_for(0.01, 8) == 1
    assert steps_for(1.0, 8) == 8
    assert steps_for(-0.5, 8) == 4


def test_warp_at_reintegrates_deterministically():
    v = LinearVelocity(A, CENTER)
    a = warp_at(v, X0, 0.4, 10).data
    b = warp_at(v, X0, 0.4, 10).data
    assert np.array_equal(a, b)
    assert np.array_equal(warp_at(v, X0, 0.0).data, np.zeros((8, 8, 2)))


def test_warp_field_and_trajectory_types():
    assert np.array_equal(WarpField.identity(3, 4).disp, np.zeros((3, 4, 2)))
    assert WarpField.identity(3, 4).mapped()[2, 3].tolist() == [2.0, 3.0]
    with pytest.raises(ValueError):
        WarpField(np.full((2, 2, 2), np.nan))
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [np.zeros((2, 2, 2))] * 2)
    with pytest.raises(ValueError):
        Trajectory([0.0], [])


# -- invertibility ---------------------------------------------------------------

def test_residual_zero_velocity():
    assert invertibility_residual(ConstantVelocity([0.0, 0.0]), X0) == 0.0


def test_residual_translation():
    assert invertibility_residual(ConstantVelocity([0.5, -1.0]), np.zeros((12, 12, 1))) < 1e-10


def test_residual_linear_field():
    small = 0.1 * A
    x0 = np.zeros((16, 16, 1))
    v = LinearVelocity(small, (7.5, 7.5))
    assert invertibility_residual(v, x0, steps=32) < 0.05
