#!/usr/bin/env python3
"""
Tests for the tensor engine and the Adam optimizer
"""

import sys

import numpy as np

from backend.core.errors import GraphError, NonFiniteError, ShapeError
from backend.core.gradcheck import check_gradient
from backend.core.optim import Adam, AdamState, adam_step
from backend.core import tensor as T
from backend.core.tensor import Tensor, backward, grad, no_grad, parameter

RNG = np.random.default_rng(7)
TOL = 1e-6


def raises(exc, fn):
    try:
        fn()
    except exc:
        return True
    return False


def test_elementwise_gradients():
    """Unary and binary ops agree with central differences"""
    x = RNG.uniform(0.5, 1.5, size=(4, 3))
    other = RNG.normal(size=(4, 3))
    cases = {
        "add": lambda t: t + other,
        "mul": lambda t: t * other,
        "div": lambda t: other / t,
        "pow": lambda t: t ** 3,
        "exp": lambda t: T.exp(t),
        "log": lambda t: T.log(t),
        "sqrt": lambda t: T.sqrt(t),
        "sin": lambda t: T.sin(t) * T.cos(t),
        "sigmoid": lambda t: T.sigmoid(t),
        "softplus": lambda t: T.softplus(t - 1.0),
    }
    for name, fn in cases.items():
        err = check_gradient(fn, x)
        assert err < TOL, f"{name}: relative error {err}"


def test_reduction_and_shape_gradients():
    """Reductions, broadcasting and indexing agree with central differences"""
    x = RNG.normal(size=(3, 4))
    w = RNG.normal(size=(4, 2))
    cases = {
        "matmul": lambda t: t @ w,
        "broadcast": lambda t: t + T.Tensor(np.ones((2, 3, 4))),
        "sum_axis": lambda t: T.tsum(t * t, axis=0),
        "mean": lambda t: T.mean(t, axis=1, keepdims=True) * t,
        "norm": lambda t: T.norm(t, axis=-1),
        "softmax": lambda t: T.softmax(t, axis=-1) * T.Tensor(np.arange(4.0)),
        "getitem": lambda t: t[1:, ::2] * 2.0,
        "fancy_index": lambda t: t[np.array([0, 2, 2])],
        "concat": lambda t: T.concat([t, t * t], axis=1),
        "stack": lambda t: T.stack([t, T.exp(t)], axis=0),
        "swapaxes": lambda t: T.swapaxes(t, 0, 1) @ T.Tensor(np.ones(3)),
    }
    for name, fn in cases.items():
        err = check_gradient(fn, x)
        assert err < TOL, f"{name}: relative error {err}"


def test_second_order():
    """Gradients of gradients: d/dx sum(d/dx sum(x^3)) = 6x"""
    x = parameter(RNG.normal(size=5))
    (g,) = grad([T.tsum(x ** 3)], [x], create_graph=True)
    assert np.allclose(g.data, 3.0 * x.data ** 2)
    (h,) = grad([T.tsum(g)], [x])
    assert np.allclose(h.data, 6.0 * x.data)


def test_eikonal_style_second_order():
    """Parameter gradient of a penalty on a spatial gradient matches finite differences"""
    points = RNG.normal(size=(6, 3))
    w0 = RNG.normal(size=(3, 3))

    def penalty(w_value):
        w = parameter(w_value) if not isinstance(w_value, Tensor) else w_value
        x = parameter(points)
        s = T.tsum(T.sin(x @ w), axis=-1)
        (gx,) = grad([s], [x], create_graph=True)
        return T.mean((T.norm(gx, axis=-1) - 1.0) ** 2)

    w = parameter(w0)
    (analytic,) = grad([penalty(w)], [w])
    eps = 1e-5
    numeric = np.zeros_like(w0)
    for idx in np.ndindex(*w0.shape):
        plus, minus = w0.copy(), w0.copy()
        plus[idx] += eps
        minus[idx] -= eps
        numeric[idx] = (penalty(plus).item() - penalty(minus).item()) / (2 * eps)
    assert np.allclose(analytic.data, numeric, atol=1e-6)


def test_unused_inputs_and_backward():
    """Unused inputs get zero gradients; backward() accumulates into leaves"""
    a, b = parameter([1.0, 2.0]), parameter([3.0])
    loss = T.tsum(a * a)
    ga, gb = backward(loss, [a, b])
    assert np.allclose(ga, [2.0, 4.0])
    assert np.allclose(gb, [0.0])
    loss.backward()
    assert np.allclose(a.grad, [2.0, 4.0])


def test_errors():
    """Shape mismatches, non-finite values and misuse raise typed errors"""
    assert raises(ShapeError, lambda: Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3))))
    assert raises(NonFiniteError, lambda: T.log(Tensor([0.0])))
    assert raises(GraphError, lambda: parameter(np.ones(3)).backward())


def test_no_grad():
    """Operations under no_grad are not recorded"""
    x = parameter([1.0, 2.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert y.is_leaf
    assert (x * 2.0).requires_grad


def test_adam_first_step():
    """The first bias-corrected Adam step moves each entry by lr against the gradient sign"""
    p = parameter([1.0, -2.0])
    opt = Adam({"p": p}, lr=0.1)
    opt.step({"p": np.array([4.0, -0.5])})
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-6)
    assert opt.state.steps["p"] == 1


def test_adam_freeze_and_groups():
    """Frozen parameters and parameters without a gradient keep their values exactly"""
    a, b, c = parameter([1.0]), parameter([1.0]), parameter([1.0])
    opt = Adam({"net.a": a, "latent.b": b, "pose.c": c}, lr=0.1, lr_groups={"latent.": 0.01})
    opt.freeze(["pose.c"])
    g = {"net.a": np.array([1.0]), "latent.b": np.array([1.0]), "pose.c": np.array([1.0])}
    opt.step(g)
    assert np.allclose(a.data, [0.9])
    assert np.allclose(b.data, [0.99])
    after_first = b.data[0]
    assert c.data[0] == 1.0
    opt.step({"net.a": np.array([1.0])})
    assert b.data[0] == after_first
    assert opt.state.steps["net.a"] == 2 and opt.state.steps["latent.b"] == 1
    opt.unfreeze(["pose.c"])
    opt.step(g)
    assert c.data[0] < 1.0


def test_adam_minimizes_quadratic():
    """Adam drives a quadratic to its minimum"""
    p = parameter(np.zeros(3))
    target = np.array([0.5, -1.0, 2.0])
    opt = Adam({"p": p}, lr=0.05)
    for _ in range(1000):
        (g,) = backward(T.tsum((p - target) ** 2), [p])
        opt.step({"p": g})
    assert np.allclose(p.data, target, atol=0.05)


def test_adam_rejects_bad_gradients():
    """Non-finite or misshaped gradients are refused"""
    p = parameter([1.0, 2.0])
    opt = Adam({"p": p})
    assert raises(NonFiniteError, lambda: opt.step({"p": np.array([np.nan, 0.0])}))
    assert raises(ShapeError, lambda: opt.step({"p": np.zeros(3)}))
    assert np.array_equal(p.data, [1.0, 2.0])


def test_simple_identities():
    """softmax of equal logits is uniform, the identity matrix leaves vectors alone, exp(0) is 1"""
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    v = RNG.normal(size=3)
    assert np.allclose((Tensor(np.eye(3)) @ Tensor(v)).data, v)
    assert T.exp(Tensor(0.0)).item() == 1.0


def test_constant_loss_has_zero_gradients():
    p = parameter([1.0, 2.0])
    (g,) = backward(Tensor(3.0), [p])
    assert np.array_equal(g, [0.0, 0.0])


def test_adam_zero_gradient_keeps_params():
    p = parameter([0.5, -0.5])
    opt = Adam({"p": p}, lr=0.1)
    opt.step({"p": np.zeros(2)})
    assert np.array_equal(p.data, [0.5, -0.5])


def test_adam_scalar_recurrence():
    """200 steps on (x - 3)^2 with lr 0.1 end within 0.05 of the minimum"""
    x = parameter(0.0)
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(200):
        (g,) = backward((x - 3.0) ** 2, [x])
        opt.step({"x": g})
    assert abs(x.item() - 3.0) < 0.05


def test_adam_step_per_parameter_counts():
    """Parameters missing from the gradient map neither move nor advance their step count"""
    a = parameter([1.0, 1.0])
    b = parameter([0.0, 0.0])
    state = AdamState(lr=0.1)
    adam_step({"a": a, "b": b}, {"a": np.array([2.0, -3.0])}, state)
    assert np.allclose(a.data, [0.9, 1.1])
    assert np.array_equal(b.data, [0.0, 0.0])
    assert state.steps == {"a": 1}
    adam_step({"a": a, "b": b}, {"b": np.array([1.0, 1.0])}, state)
    assert np.allclose(b.data, [-0.1, -0.1])
    assert state.steps == {"a": 1, "b": 1}
    assert state.step_count == 1


def main():
    print("Testing the tensor engine")
    print("=" * 40)

    tests = [
        ("Elementwise gradients", test_elementwise_gradients),
        ("Reduction and shape gradients", test_reduction_and_shape_gradients),
        ("Second-order gradients", test_second_order),
        ("Gradient-penalty gradients", test_eikonal_style_second_order),
        ("Unused inputs", test_unused_inputs_and_backward),
        ("Typed errors", test_errors),
        ("no_grad", test_no_grad),
        ("Adam first step", test_adam_first_step),
        ("Adam freezing and groups", test_adam_freeze_and_groups),
        ("Adam convergence", test_adam_minimizes_quadratic),
        ("Adam gradient checks", test_adam_rejects_bad_gradients),
        ("Simple identities", test_simple_identities),
        ("Constant loss", test_constant_loss_has_zero_gradients),
        ("Adam zero gradient", test_adam_zero_gradient_keeps_params),
        ("Adam scalar recurrence", test_adam_scalar_recurrence),
        ("Adam per-parameter steps", test_adam_step_per_parameter_counts),
    ]

    results = []
    for name, test_func in tests:
        print(f"\n{name}:")
        try:
            test_func()
            result = True
        except Exception as e:
            print(f"❌ {type(e).__name__}: {e}")
            result = False
        results.append((name, result))

    print("\n" + "=" * 40)
    print("Results:")
    for name, result in results:
        status = "PASS" if result else "FAIL"
        print(f"{name}: {status}")
    return all(result for _, result in results)


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
