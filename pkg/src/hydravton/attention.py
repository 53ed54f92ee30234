"""Attention blocks: plain multi-head attention, branch-parallel condition
encoding, and key/value fusion into the generator stream.

A branch set duplicates only the four self-attention projection matrices per
condition; every other parameter of the enclosing block stays shared. At a
fusion site the per-condition key/value features each receive their own
learned positional embedding, then all conditions plus the generator's own
key/value are concatenated along the sequence axis before attention.
"""

import math
import re

import numpy as np

from . import ops
from .nn import Module, param
from .tensor import ShapeError


class AttentionWeights(Module):
    """Projection matrices for one attention site (q, k, v, out)."""

    def __init__(self, c, heads, rng, ctx_dim=None):
        if c % heads != 0:
            raise ShapeError(f"channels {c} not divisible by {heads} heads")
        d = ctx_dim if ctx_dim is not None else c
        std = math.sqrt(1.0 / c)
        self.q = param(rng, (c, c), std)
        self.k = param(rng, (d, c), math.sqrt(1.0 / d))
        self.v = param(rng, (d, c), math.sqrt(1.0 / d))
        self.out = param(rng, (c, c), std)
        self.head_count = heads

    def copy_from(self, other):
        for name in ("q", "k", "v", "out"):
            getattr(self, name).data[...] = getattr(other, name).data


class HydraBranchSet(Module):
    """N per-condition copies of self-attention projections, identical at init.

    `shared` points back at the enclosing block whose remaining parameters
    all conditions reuse.
    """

    def __init__(self, c, heads, rng, n_branches, shared=None):
        if n_branches < 1:
            raise ShapeError(f"branch count must be >= 1, got {n_branches}")
        first = AttentionWeights(c, heads, rng)
        self.branch = [first]
        for _ in range(n_branches - 1):
            twin = AttentionWeights(c, heads, rng)
            twin.copy_from(first)
            self.branch.append(twin)
        self._shared = shared  # not a parameter; reference only

    def named_parameters(self, prefix=""):
        out = {}
        for i, br in enumerate(self.branch):
            out.update(br.named_parameters(prefix=f"{prefix}branch{i}."))
        return out

    @property
    def n_branches(self):
        return len(self.branch)


class PositionalEmbeddingTable(Module):
    """Per-condition learned position embeddings, one (l_max, c) table each."""

    def __init__(self, n_conditions, l_max, c, rng, std=0.02):
        self.cond = [param(rng, (l_max, c), std) for _ in range(n_conditions)]
        self.l_max = l_max

    def named_parameters(self, prefix=""):
        return {f"{prefix}cond{i}": t for i, t in enumerate(self.cond)}

    def lookup(self, condition, length):
        table = self.cond[condition]
        if length > table.shape[0]:
            raise ShapeError(
                f"position embedding lookup of length {length} exceeds table length {table.shape[0]}"
            )
        return table[:length]


class HydraKV:
    """Per-condition (key, value) pairs captured at one attention site."""

    def __init__(self, pairs):
        pairs = list(pairs)
        if pairs:
            b, _, c = pairs[0][0].shape
            for k, v in pairs:
                if k.shape[0] != b or k.shape[2] != c or v.shape != k.shape:
                    raise ShapeError("hydra K/V pairs must share batch and channel dims")
        self.pairs = pairs

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def multi_head_attention(q, k, v, heads):
    """Scaled dot-product attention with head split; inputs are projected
    (b,l,c) sequences and the result is the pre-output-projection context."""
    b, lq, c = q.shape
    if k.shape[2] != c or v.shape[2] != c:
        raise ShapeError(f"attention channel mismatch: q {list(q.shape)} vs k {list(k.shape)}")
    dh = c // heads
    scale = 1.0 / math.sqrt(dh)

    def split(t):
        l = t.shape[1]
        return ops.transpose(t.reshape(b, l, heads, dh), (0, 2, 1, 3)).reshape(b * heads, l, dh)

    qh, kh, vh = split(q), split(k), split(v)
    scores = ops.matmul(qh, ops.transpose(kh, (0, 2, 1))) * scale
    attn = ops.softmax(scores, axis=2)
    ctx = ops.matmul(attn, vh)
    return ops.transpose(ctx.reshape(b, heads, lq, dh), (0, 2, 1, 3)).reshape(b, lq, c)


def self_attention(x, w):
    """Multi-head self-attention over (b,l,c); residual is the caller's job."""
    q = ops.matmul(x, w.q)
    k = ops.matmul(x, w.k)
    v = ops.matmul(x, w.v)
    ctx = multi_head_attention(q, k, v, w.head_count)
    return ops.matmul(ctx, w.out)


def cross_attention(x, context, w):
    """Attention of (b,l,c) queries against a (b,m,d) context sequence."""
    q = ops.matmul(x, w.q)
    k = ops.matmul(context, w.k)
    v = ops.matmul(context, w.v)
    ctx = multi_head_attention(q, k, v, w.head_count)
    return ops.matmul(ctx, w.out)


def hydra_encode(conditions, branch_set):
    """Project each condition's sequence through its own branch k/v matrices.

    The surrounding block (norm, cross-attention, convs) is shared across
    conditions; only these projections are per-condition.
    """
    if len(conditions) != branch_set.n_branches:
        raise ShapeError(
            f"got {len(conditions)} conditions for {branch_set.n_branches} branches"
        )
    pairs = []
    for x, br in zip(conditions, branch_set.branch):
        pairs.append((ops.matmul(x, br.k), ops.matmul(x, br.v)))
    return HydraKV(pairs)


def hydra_fuse(main_q, main_kv, hydra, pe, heads=4):
    """Attend main queries against main K/V concatenated with all conditions.

    Each condition's K and V get that condition's positional embedding added
    before concatenation, so total key length is l_main + sum of condition
    lengths. Returns the attention context (apply the out projection after).
    """
    main_k, main_v = main_kv
    c = main_q.shape[2]
    k_parts, v_parts = [main_k], [main_v]
    for i, (k_i, v_i) in enumerate(hydra):
        if k_i.shape[2] != c:
            raise ShapeError(
                f"condition {i} channel mismatch: {k_i.shape[2]} vs main {c}"
            )
        e = pe.lookup(i, k_i.shape[1])
        k_parts.append(k_i + e)
        v_parts.append(v_i + e)
    if len(k_parts) == 1:
        k_all, v_all = main_k, main_v
    else:
        k_all = ops.concat(k_parts, axis=1)
        v_all = ops.concat(v_parts, axis=1)
    return multi_head_attention(main_q, k_all, v_all, heads)


# -- parameter accounting ----------------------------------------------

_BRANCH_NAME = re.compile(r"(?:^|\.)attn\.branch(\d+)\.")
_PE_NAME = re.compile(r"(?:^|\.)pe\.cond(\d+)$")


class ParamCounts:
    """Exact integer totals split into per-condition vs shared groups."""

    def __init__(self, shared, per_condition_branch, per_condition_pe, n_conditions):
        self.shared = shared
        self.per_condition_branch = per_condition_branch
        self.per_condition_pe = per_condition_pe
        self.n_conditions = n_conditions

    @property
    def per_condition(self):
        return self.per_condition_branch + self.per_condition_pe

    @property
    def total(self):
        return self.shared + self.n_conditions * self.per_condition

    @property
    def marginal_fraction(self):
        """Cost of one added condition relative to the single-condition model."""
        return self.per_condition / (self.shared + self.per_condition)

    def __repr__(self):
        return (
            f"ParamCounts(shared={self.shared}, per_condition={self.per_condition}, "
            f"n={self.n_conditions}, total={self.total}, "
            f"marginal_fraction={self.marginal_fraction:.4f})"
        )


def count_parameters(model):
    """Exhaustive traversal of model parameters grouped by condition scaling.

    Per-condition parameters are the duplicated self-attention projections
    plus the per-condition positional embedding tables; everything else is
    shared and independent of the condition count.
    """
    per_branch = {}
    per_pe = {}
    shared = 0
    for name, t in model.named_parameters().items():
        m = _BRANCH_NAME.search(name)
        if m:
            per_branch[int(m.group(1))] = per_branch.get(int(m.group(1)), 0) + t.size
            continue
        m = _PE_NAME.search(name)
        if m:
            per_pe[int(m.group(1))] = per_pe.get(int(m.group(1)), 0) + t.size
            continue
        shared += t.size
    n = max(len(per_branch), len(per_pe), 1)
    branch_sizes = set(per_branch.values())
    pe_sizes = set(per_pe.values())
    if len(branch_sizes) > 1 or len(pe_sizes) > 1:
        raise ShapeError("conditions have unequal parameter counts")
    return ParamCounts(
        shared=int(shared),
        per_condition_branch=int(branch_sizes.pop()) if branch_sizes else 0,
        per_condition_pe=int(pe_sizes.pop()) if pe_sizes else 0,
        n_conditions=n,
    )
