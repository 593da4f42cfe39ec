"""Domain-incremental prompt pool with diverse attribute matching.

Each domain owns an isolated slot: per-layer prompt sequences plus N
attribute projection / prototype pairs. A frozen query embedding is matched
against the learned attributes to pick the slot at inference time.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROMPT_LEN = 16
NUM_ATTRIBUTES = 4
INIT_SCALE = 0.02


class PoolStateError(RuntimeError):
    """Raised on protocol violations (e.g. adding a domain mid-training)."""


class DomainSlot:
    """Prompts and attribute embeddings for one domain. Never shared."""

    def __init__(self, domain_id, layer_dims, feature_dim, rng,
                 prompt_len=PROMPT_LEN, num_attributes=NUM_ATTRIBUTES):
        self.domain_id = domain_id
        self.prompt_len = prompt_len
        self.num_attributes = num_attributes
        self.prompts = [
            Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, size=(prompt_len, d)), requires_grad=True)
            for d in layer_dims
        ]
        self.projections = [
            Tensor(1.0 + rng.uniform(-INIT_SCALE, INIT_SCALE, size=feature_dim), requires_grad=True)
            for _ in range(num_attributes)
        ]
        protos = []
        for _ in range(num_attributes):
            v = rng.normal(size=feature_dim)
            protos.append(Tensor(v / np.linalg.norm(v), requires_grad=True))
        self.prototypes = protos

    def all_tensors(self):
        return list(self.prompts) + self.projections + self.prototypes

    def trainable_count(self):
        return sum(p.size for p in self.all_tensors())

    def freeze(self):
        for p in self.all_tensors():
            p.requires_grad = False

    def renormalize_prototypes(self):
        """Keep prototypes unit-norm after optimizer steps."""
        for k in self.prototypes:
            n = np.linalg.norm(k.data)
            if n > 0:
                k.data /= n

    def named_arrays(self, prefix):
        out = {}
        for li, p in enumerate(self.prompts):
            out[f"{prefix}.prompt{li}"] = p
        for j in range(self.num_attributes):
            out[f"{prefix}.proj{j}"] = self.projections[j]
            out[f"{prefix}.proto{j}"] = self.prototypes[j]
        return out


class PromptPool:
    def __init__(self, layer_dims, feature_dim, seed=0,
                 prompt_len=PROMPT_LEN, num_attributes=NUM_ATTRIBUTES):
        self.layer_dims = list(layer_dims)
        self.feature_dim = feature_dim
        self.seed = seed
        self.prompt_len = prompt_len
        self.num_attributes = num_attributes
        self.slots = []
        self._training_domain = None

    @property
    def num_domains(self):
        return len(self.slots)

    def add_domain(self):
        """Append a freshly initialized slot and mark it as in training."""
        if self._training_domain is not None:
            raise PoolStateError(f"domain {self._training_domain} is still training")
        domain_id = len(self.slots)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 31, domain_id]))
        slot = DomainSlot(domain_id, self.layer_dims, self.feature_dim, rng,
                          self.prompt_len, self.num_attributes)
        self.slots.append(slot)
        self._training_domain = domain_id
        return domain_id

    def finish_domain(self):
        """Freeze the in-training slot; it is immutable from now on."""
        if self._training_domain is None:
            raise PoolStateError("no domain is training")
        self.slots[self._training_domain].freeze()
        self._training_domain = None

    def prompts_for(self, domain_id, layer):
        if not 0 <= domain_id < len(self.slots):
            raise LookupError(f"unknown domain {domain_id} (pool has {len(self.slots)})")
        if not 0 <= layer < len(self.layer_dims):
            raise LookupError(f"unknown prompted layer {layer}")
        return self.slots[domain_id].prompts[layer]

    def selector(self, domain_id):
        """Per-layer prompt lookup for the backbone's forward passes."""
        return lambda layer: self.prompts_for(domain_id, layer)


def attribute_similarity(q, w, k):
    """Cosine similarity between the channel-reweighted query q*w and prototype k.

    Zero-norm reweighted queries fall back to similarity 0 with zero gradient.
    """
    qw = T.mul(q, w)
    if float(np.linalg.norm(qw.data)) == 0.0 or float(np.linalg.norm(k.data)) == 0.0:
        return Tensor(0.0)
    return T.cosine(qw, k)


def attribute_loss(q, slot):
    """Sum of (1 - similarity) over the slot's attribute pairs."""
    terms = [T.add(T.mul(attribute_similarity(q, w, k), -1.0), 1.0)
             for w, k in zip(slot.projections, slot.prototypes)]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def diversity_loss(slot):
    """Squared pairwise cosines within projections and within prototypes.

    Ordered pairs (m, n) and (n, m) both count, matching the double sum.
    """
    total = Tensor(0.0)
    for group in (slot.projections, slot.prototypes):
        n = len(group)
        for m in range(n):
            for j in range(n):
                if m == j:
                    continue
                c = T.cosine(group[m], group[j])
                total = T.add(total, T.mul(c, c))
    return total


def domain_score(q, slot):
    """Mean attribute similarity between query q and the slot's attributes."""
    sims = [attribute_similarity(q, w, k)
            for w, k in zip(slot.projections, slot.prototypes)]
    total = sims[0]
    for s in sims[1:]:
        total = T.add(total, s)
    return T.mul(total, 1.0 / slot.num_attributes)


def select_domain(q, pool):
    """Argmax of domain scores; ties broken by lowest domain index."""
    if pool.num_domains == 0:
        raise PoolStateError("cannot select from an empty pool")
    with T.no_grad():
        scores = [float(domain_score(q, slot).data) for slot in pool.slots]
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best
