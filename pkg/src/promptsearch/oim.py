"""Online Instance Matching loss with an identity lookup table and
an unlabeled circular queue. The table and queue are buffers: gradients
flow to the input features only.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from . import tensor as T
from .tensor import Tensor

UNLABELED = -1
MOMENTUM = 0.5
TEMPERATURE = 0.1
QUEUE_SIZE = 64


class OimState:
    """Per-domain training state, created fresh at domain start."""

    def __init__(self, num_identities, feature_dim, seed=0,
                 momentum=MOMENTUM, temperature=TEMPERATURE, queue_size=QUEUE_SIZE):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 37]))
        lut = rng.normal(size=(num_identities, feature_dim))
        lut /= np.linalg.norm(lut, axis=1, keepdims=True)
        self.lut = lut
        self.cq = deque(maxlen=queue_size)
        self.momentum = momentum
        self.temperature = temperature
        self.queue_size = queue_size

    @property
    def num_identities(self):
        return self.lut.shape[0]

    def bank(self):
        """Stacked [lut; cq] buffer used as softmax references."""
        if self.cq:
            return np.vstack([self.lut, np.stack(list(self.cq))])
        return self.lut.copy()


def oim_loss(features, labels, state):
    """Mean negative log-probability of labeled features against the bank.

    features: list of 1-D Tensors (unnormalized); labels: identity index or
    UNLABELED per feature. Returns a scalar Tensor (0 with no labeled input).
    """
    for t in labels:
        if t != UNLABELED and not 0 <= t < state.num_identities:
            raise IndexError(f"identity {t} out of range for lut of {state.num_identities}")
    labeled = [(f, t) for f, t in zip(features, labels) if t != UNLABELED]
    if not labeled:
        return Tensor(0.0)
    bank = Tensor(state.bank().T)  # [d, n_refs]
    terms = []
    for f, t in labeled:
        fn = T.l2_normalize(f)
        logits = T.mul(T.matmul(T.reshape(fn, (1, -1)), bank), 1.0 / state.temperature)
        logp = T.log_softmax(logits, axis=-1)
        terms.append(T.mul(logp[0, t], -1.0))
    total = terms[0]
    for t_ in terms[1:]:
        total = T.add(total, t_)
    return T.mul(total, 1.0 / len(terms))


def oim_update(features, labels, state):
    """Momentum-update lut rows for labeled features; push unlabeled to cq."""
    for f, t in zip(features, labels):
        x = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=float)
        n = np.linalg.norm(x)
        if n == 0:
            continue
        x = x / n
        if t == UNLABELED:
            state.cq.append(x)
        else:
            mixed = state.momentum * state.lut[t] + (1 - state.momentum) * x
            state.lut[t] = mixed / np.linalg.norm(mixed)
    return state
