"""Shared helpers: central finite-difference gradient checking."""

import numpy as np
import pytest

from promptsearch import tensor as T


def numerical_grad(fn, arr, eps=1e-6):
    """Central finite differences of a scalar function of one array."""
    grad = np.zeros_like(arr, dtype=float)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(arr.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / scale


def assert_gradients_match(build, arrays, rtol=1e-4, eps=1e-6):
    """build(tensors) must return a scalar Tensor; checks d/d(array) for each
    input against central differences."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()
    for t, arr in zip(tensors, arrays):
        def value():
            fresh = [T.Tensor(a) for a in arrays]
            return build(*fresh).item()
        num = numerical_grad(value, arr, eps=eps)
        err = rel_error(t.grad, num)
        assert err < rtol, f"gradient mismatch: rel error {err:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _u(rng, *shape):
    return rng.uniform(-1.5, 1.5, size=shape)


# name -> (make_arrays(rng), build(*tensors) returning a scalar Tensor).
# Shared by the op-level tests and the timed full gradient sweep.
GRADIENT_CASES = {
    "add": (lambda r: [_u(r, 3, 4), _u(r, 3, 4)],
            lambda a, b: T.sum_(T.mul(T.add(a, b), _w(a)))),
    "add_broadcast": (lambda r: [_u(r, 2, 3, 4), _u(r, 3, 4)],
                      lambda a, b: T.sum_(T.mul(T.add(a, b), _w(a)))),
    "mul": (lambda r: [_u(r, 3, 4), _u(r, 3, 4)],
            lambda a, b: T.sum_(T.mul(T.mul(a, b), _w(a)))),
    "mul_broadcast": (lambda r: [_u(r, 2, 3, 4), _u(r, 4)],
                      lambda a, b: T.sum_(T.mul(T.mul(a, b), _w(a)))),
    "div": (lambda r: [_u(r, 3, 3), r.uniform(0.5, 2.0, (3, 3))],
            lambda a, b: T.sum_(T.mul(T.div(a, b), _w(a)))),
    "exp": (lambda r: [_u(r, 3, 3)], lambda a: T.sum_(T.mul(T.exp(a), _w(a)))),
    "log": (lambda r: [r.uniform(0.3, 3.0, (3, 3))],
            lambda a: T.sum_(T.mul(T.log(a), _w(a)))),
    "sqrt": (lambda r: [r.uniform(0.3, 3.0, (3, 3))],
             lambda a: T.sum_(T.mul(T.sqrt(a), _w(a)))),
    "tanh": (lambda r: [_u(r, 3, 3)], lambda a: T.sum_(T.mul(T.tanh(a), _w(a)))),
    "sigmoid": (lambda r: [_u(r, 3, 3)],
                lambda a: T.sum_(T.mul(T.sigmoid(a), _w(a)))),
    "gelu": (lambda r: [_u(r, 3, 3)], lambda a: T.sum_(T.mul(T.gelu(a), _w(a)))),
    "reshape": (lambda r: [_u(r, 2, 6)],
                lambda a: T.sum_(T.mul(T.reshape(a, (3, 4)), _w2(3, 4)))),
    "transpose": (lambda r: [_u(r, 2, 3, 4)],
                  lambda a: T.sum_(T.mul(T.transpose(a, (2, 0, 1)), _w2(4, 2, 3)))),
    "concat": (lambda r: [_u(r, 2, 3), _u(r, 4, 3)],
               lambda a, b: T.sum_(T.mul(T.concat([a, b], axis=0), _w2(6, 3)))),
    "getitem_slice": (lambda r: [_u(r, 4, 5)],
                      lambda a: T.sum_(T.mul(a[1:3, ::2], _w2(2, 3)))),
    "getitem_fancy": (lambda r: [_u(r, 5, 3)],
                      lambda a: T.sum_(T.mul(a[(np.array([0, 2, 2]),)], _w2(3, 3)))),
    "expand_leading": (lambda r: [_u(r, 3, 4)],
                       lambda a: T.sum_(T.mul(T.expand_leading(a, 3), _w2(3, 3, 4)))),
    "pad2d": (lambda r: [_u(r, 3, 3, 2)],
              lambda a: T.sum_(T.mul(T.pad2d(a, 1, 0, 2, 1), _w2(4, 6, 2)))),
    "zero_upsample2d": (lambda r: [_u(r, 3, 3, 2)],
                        lambda a: T.sum_(T.mul(T.zero_upsample2d(a, 2), _w2(6, 6, 2)))),
    "take_flat": (lambda r: [_u(r, 4, 3)],
                  lambda a: T.sum_(T.mul(T.take_flat(T.reshape(a, (12,)),
                                                     np.array([1, 5, 5, 0])), _w2(4)))),
    "sum_axis": (lambda r: [_u(r, 3, 4)],
                 lambda a: T.sum_(T.mul(T.sum_(a, axis=0), _w2(4)))),
    "mean_axis": (lambda r: [_u(r, 3, 4)],
                  lambda a: T.sum_(T.mul(T.mean(a, axis=1), _w2(3)))),
    "matmul": (lambda r: [_u(r, 3, 4), _u(r, 4, 2)],
               lambda a, b: T.sum_(T.mul(T.matmul(a, b), _w2(3, 2)))),
    "matmul_batched": (lambda r: [_u(r, 2, 3, 4), _u(r, 2, 4, 2)],
                       lambda a, b: T.sum_(T.mul(T.matmul(a, b), _w2(2, 3, 2)))),
    "softmax": (lambda r: [_u(r, 3, 4)],
                lambda a: T.sum_(T.mul(T.softmax(a), _w2(3, 4)))),
    "log_softmax": (lambda r: [_u(r, 3, 4)],
                    lambda a: T.sum_(T.mul(T.log_softmax(a), _w2(3, 4)))),
    "layer_norm": (lambda r: [_u(r, 3, 5), r.uniform(0.5, 1.5, 5), _u(r, 5)],
                   lambda x, g, b: T.sum_(T.mul(T.layer_norm(x, g, b), _w2(3, 5)))),
    "smooth_l1": (lambda r: [_u(r, 3, 4)],
                  lambda a: T.sum_(T.mul(T.smooth_l1(a, np.full((3, 4), 0.3)),
                                         _w2(3, 4)))),
    "bce_with_logits": (lambda r: [_u(r, 3, 4)],
                        lambda a: T.sum_(T.mul(
                            T.bce_with_logits(a, (np.arange(12).reshape(3, 4) % 2)
                                              .astype(float)), _w2(3, 4)))),
    "cosine": (lambda r: [r.uniform(0.2, 1.5, 5), r.uniform(0.2, 1.5, 5)],
               lambda a, b: T.cosine(a, b)),
    "l2_normalize": (lambda r: [r.uniform(0.3, 1.5, 5)],
                     lambda a: T.sum_(T.mul(T.l2_normalize(a), _w2(5)))),
    "conv2d": (lambda r: [_u(r, 5, 5, 2), _u(r, 3, 3, 2, 3) * 0.3, _u(r, 3)],
               lambda x, k, b: T.sum_(T.mul(T.conv2d(x, k, b, stride=1, padding=1),
                                            _w2(5, 5, 3)))),
    "conv2d_strided": (lambda r: [_u(r, 6, 6, 2), _u(r, 2, 2, 2, 3) * 0.3],
                       lambda x, k: T.sum_(T.mul(T.conv2d(x, k, stride=2),
                                                 _w2(3, 3, 3)))),
    "deconv2d": (lambda r: [_u(r, 3, 3, 2), _u(r, 3, 3, 2, 3) * 0.3, _u(r, 3)],
                 lambda x, k, b: T.sum_(T.mul(T.deconv2d(x, k, b, stride=2),
                                              _w2(6, 6, 3)))),
}


def _w(t):
    """Fixed weighting so sums do not hide sign errors."""
    return _w2(*t.shape)


def _w2(*shape):
    n = int(np.prod(shape)) if shape else 1
    return np.cos(np.arange(n, dtype=float)).reshape(shape) + 1.5
