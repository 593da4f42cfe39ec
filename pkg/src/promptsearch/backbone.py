"""Miniature hierarchical windowed-attention backbone.

The network is split into a trunk (patch embedding + first two stages,
operating on the whole image grid) and a tail (last stage, refining per-box
RoI feature maps into pooled 1-D person embeddings). Every attention layer
accepts optional prompt tokens that are duplicated per window and stripped
from the output, so spatial shapes are unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 4
    stage_dims: tuple = (32, 64, 128)
    stage_depths: tuple = (2, 2, 2)
    heads: tuple = (2, 4, 8)
    window: int = 4
    image_size: int = 64
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if list(self.stage_dims) != sorted(set(self.stage_dims)):
            raise ValueError("stage_dims must strictly increase")
        for dim, h in zip(self.stage_dims, self.heads):
            if dim % h:
                raise ValueError(f"dim {dim} not divisible by head count {h}")

    @property
    def num_layers(self):
        return sum(self.stage_depths)

    def layer_dims(self):
        """Embedding dim of each prompted attention layer, in forward order."""
        dims = []
        for dim, depth in zip(self.stage_dims, self.stage_depths):
            dims.extend([dim] * depth)
        return dims

    @property
    def feature_dim(self):
        return self.stage_dims[-1]


def window_partition(grid, window):
    """[H, W, C] grid -> [num_windows, window*window, C] token batches."""
    h, w, c = grid.shape
    if h % window or w % window:
        raise ShapeError(f"window_partition: grid {grid.shape} not divisible by window {window}")
    x = T.reshape(grid, (h // window, window, w // window, window, c))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, ((h // window) * (w // window), window * window, c))


def window_merge(windows, h, w, window):
    """Inverse of window_partition."""
    nw, t, c = windows.shape
    if nw != (h // window) * (w // window) or t != window * window:
        raise ShapeError(f"window_merge: {windows.shape} does not tile a {h}x{w} grid")
    x = T.reshape(windows, (h // window, w // window, window, window, c))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (h, w, c))


class Linear:
    def __init__(self, rng, din, dout, scale=None):
        # fan-in scaling by default; tiny init starves the residual stream
        if scale is None:
            scale = din ** -0.5
        self.weight = Tensor(rng.normal(0.0, scale, size=(din, dout)), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def __call__(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)

    def params(self):
        return [self.weight, self.bias]


class LayerNorm:
    def __init__(self, dim, eps=1e-6):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    def params(self):
        return [self.gamma, self.beta]


class WindowAttention:
    """Multi-head self-attention over windows with optional prompt tokens."""

    def __init__(self, rng, dim, heads):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def __call__(self, z, prompts=None):
        """z: [nw, tokens, C]; prompts: optional [L, C] shared across windows.

        Returns [nw, tokens, C]: attention output for the image tokens only.
        Prompt gradients accumulate as the sum over windows (duplication).
        """
        nw, t, c = z.shape
        if c != self.dim:
            raise ShapeError(f"attention: channel {c} does not match layer dim {self.dim}")
        L = 0
        seq = z
        if prompts is not None:
            if prompts.shape[-1] != c:
                raise ShapeError(f"attention: prompt width {prompts.shape} does not match channels {c}")
            L = prompts.shape[0]
            if L > 0:
                seq = T.concat([T.expand_leading(prompts, nw), z], axis=1)
        s = L + t
        q = self._split_heads(self.wq(seq), nw, s)
        k = self._split_heads(self.wk(seq), nw, s)
        v = self._split_heads(self.wv(seq), nw, s)
        att = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        att = T.softmax(att, axis=-1)
        out = T.matmul(att, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (nw, s, c))
        out = self.wo(out)
        if L > 0:
            out = out[:, L:, :]
        return out

    def _split_heads(self, x, nw, s):
        x = T.reshape(x, (nw, s, self.heads, self.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def params(self):
        return self.wq.params() + self.wk.params() + self.wv.params() + self.wo.params()


class TransformerBlock:
    """Pre-norm block: prompted window attention + MLP, both residual."""

    def __init__(self, rng, dim, heads, mlp_ratio):
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, z, prompts=None):
        z = T.add(z, self.attn(self.norm1(z), prompts))
        z = T.add(z, self.fc2(T.gelu(self.fc1(self.norm2(z)))))
        return z

    def params(self):
        return (self.norm1.params() + self.attn.params() + self.norm2.params()
                + self.fc1.params() + self.fc2.params())


def prompted_window_attention(block, z, prompts=None):
    """Attention sub-layer of a block on window batch z, with residual."""
    return T.add(z, block.attn(block.norm1(z), prompts))


class PatchMerge:
    """2x2 neighborhood concatenation followed by a linear projection."""

    def __init__(self, rng, din, dout):
        self.proj = Linear(rng, 4 * din, dout)

    def __call__(self, grid):
        h, w, c = grid.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch_merge: grid {grid.shape} not divisible by 2")
        x = T.reshape(grid, (h // 2, 2, w // 2, 2, c))
        x = T.transpose(x, (0, 2, 1, 3, 4))
        x = T.reshape(x, (h // 2, w // 2, 4 * c))
        return self.proj(x)

    def params(self):
        return self.proj.params()


class Backbone:
    """Trunk (stages 1..n-1 on the image grid) + tail (last stage on RoIs)."""

    def __init__(self, config: BackboneConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
        c = config
        self.patch_proj = Linear(rng, c.patch_size * c.patch_size * 3, c.stage_dims[0])
        self.stages = []
        self.merges = []
        for si, (dim, depth, heads) in enumerate(zip(c.stage_dims, c.stage_depths, c.heads)):
            blocks = [TransformerBlock(rng, dim, heads, c.mlp_ratio) for _ in range(depth)]
            self.stages.append(blocks)
            if si + 1 < len(c.stage_dims):
                self.merges.append(PatchMerge(rng, dim, c.stage_dims[si + 1]))
        self.final_norm = LayerNorm(c.feature_dim)
        # global indices of the first layer in each stage
        self._stage_offsets = np.cumsum([0] + list(c.stage_depths)[:-1]).tolist()

    # -- parameter plumbing ------------------------------------------------

    def params(self):
        out = self.patch_proj.params()
        for blocks in self.stages:
            for b in blocks:
                out.extend(b.params())
        for m in self.merges:
            out.extend(m.params())
        out.extend(self.final_norm.params())
        return out

    def named_params(self):
        names = {}
        names["patch_proj.weight"] = self.patch_proj.weight
        names["patch_proj.bias"] = self.patch_proj.bias
        for si, blocks in enumerate(self.stages):
            for bi, b in enumerate(blocks):
                prefix = f"stage{si}.block{bi}"
                for li, p in enumerate(b.params()):
                    names[f"{prefix}.p{li}"] = p
        for mi, m in enumerate(self.merges):
            names[f"merge{mi}.weight"] = m.proj.weight
            names[f"merge{mi}.bias"] = m.proj.bias
        names["final_norm.gamma"] = self.final_norm.gamma
        names["final_norm.beta"] = self.final_norm.beta
        return names

    def freeze(self):
        for p in self.params():
            p.requires_grad = False

    def unfreeze(self):
        for p in self.params():
            p.requires_grad = True

    # -- forward passes ------------------------------------------------------

    def patch_embed(self, image):
        """[H0, W0, 3] image -> [H0/ps, W0/ps, dim0] grid."""
        h0, w0, ch = image.shape
        ps = self.config.patch_size
        if h0 % ps or w0 % ps or ch != 3:
            raise ShapeError(f"patch_embed: image {image.shape} not divisible by patch size {ps}")
        x = T.reshape(image, (h0 // ps, ps, w0 // ps, ps, ch))
        x = T.transpose(x, (0, 2, 1, 3, 4))
        x = T.reshape(x, (h0 // ps, w0 // ps, ps * ps * ch))
        return self.patch_proj(x)

    def _run_stage(self, grid, stage_idx, prompt_selector):
        w = self.config.window
        h, wd, _ = grid.shape
        z = window_partition(grid, w)
        base = self._stage_offsets[stage_idx]
        for bi, block in enumerate(self.stages[stage_idx]):
            prompts = prompt_selector(base + bi) if prompt_selector else None
            z = block(z, prompts)
        return window_merge(z, h, wd, w)

    def trunk_forward(self, image, prompt_selector=None):
        """Image -> feature grid at 1/8 input scale (stages 1..n-1)."""
        grid = self.patch_embed(image)
        n_trunk = len(self.stages) - 1
        for si in range(n_trunk):
            grid = self._run_stage(grid, si, prompt_selector)
            if si + 1 < n_trunk:
                grid = self.merges[si](grid)
        return grid

    def tail_forward(self, roi_feature, prompt_selector=None):
        """RoI feature grid (trunk channel width) -> pooled person feature."""
        last = len(self.stages) - 1
        grid = self.merges[last - 1](roi_feature)
        grid = self._run_stage(grid, last, prompt_selector)
        pooled = T.mean(grid, axis=(0, 1))
        return self.final_norm(T.reshape(pooled, (1, -1)))[0, :]

    def query_encode(self, image):
        """Frozen whole-image embedding used only for domain selection."""
        with T.no_grad():
            grid = self.trunk_forward(image, None)
            return self.tail_forward(grid, None)

    @property
    def trunk_scale(self):
        return self.config.patch_size * 2 ** (len(self.stages) - 2)
