"""Reusable sparse MoE block: tokenize a row vector, route each token to the
top-k of N experts, apply one shared expert to every token.

Gate values are the raw softmax probabilities of the selected experts, with
no renormalization over the selected set; ties break toward the lower expert
index. Concatenating the per-token outputs restores the input width, so both
returned vectors match the input shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


@dataclass
class MoEConfig:
    num_experts: int
    top_k: int
    token_len: int
    expansion: int = 4

    def __post_init__(self):
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k must be in 1..{self.num_experts}, got {self.top_k}"
            )
        if self.token_len < 1 or self.expansion < 1:
            raise ConfigError("token_len and expansion must be >= 1")


@dataclass
class ExpertParams:
    """2-layer feed-forward unit mapping token_len -> token_len."""

    w1: np.ndarray  # [l, e*l]
    b1: np.ndarray  # [1, e*l]
    w2: np.ndarray  # [e*l, l]
    b2: np.ndarray  # [1, l]


@dataclass
class MoEParams:
    router: np.ndarray  # [l, N]
    experts: list  # N routed ExpertParams
    shared: ExpertParams


@dataclass
class RouterTrace:
    """Per-token routing record plus aggregates for balancing/diagnostics."""

    logits: np.ndarray  # [T, N]
    probs: np.ndarray  # [T, N]
    selected: np.ndarray  # [T, top_k] expert indices
    gates: np.ndarray  # [T, top_k] raw softmax probs of the selections
    num_experts: int
    probs_node: ad.Node | None = field(default=None, repr=False)

    @property
    def num_tokens(self) -> int:
        return self.logits.shape[0]

    def selection_counts(self) -> np.ndarray:
        return np.bincount(self.selected.ravel(), minlength=self.num_experts)

    def mean_probs(self) -> np.ndarray:
        return self.probs.mean(axis=0)


@dataclass
class MoEOutput:
    routed: ad.Node  # [1, d]
    shared: ad.Node  # [1, d]
    trace: RouterTrace
    tokens: ad.Node  # [T, l] inputs to the experts
    shared_tokens: ad.Node  # [T, l] shared-expert outputs per token


def _uniform_init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(rows)
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_expert_params(token_len: int, expansion: int, rng: np.random.Generator) -> ExpertParams:
    hidden = expansion * token_len
    return ExpertParams(
        w1=_uniform_init(rng, token_len, hidden),
        b1=np.zeros((1, hidden)),
        w2=_uniform_init(rng, hidden, token_len),
        b2=np.zeros((1, token_len)),
    )


def init_moe_params(cfg: MoEConfig, rng: np.random.Generator) -> MoEParams:
    return MoEParams(
        router=_uniform_init(rng, cfg.token_len, cfg.num_experts),
        experts=[
            init_expert_params(cfg.token_len, cfg.expansion, rng)
            for _ in range(cfg.num_experts)
        ],
        shared=init_expert_params(cfg.token_len, cfg.expansion, rng),
    )


def tokenize(v: ad.Node, token_len: int) -> ad.Node:
    """Reshape 1 x d into T x token_len along the feature dimension."""
    d = v.value.shape[1]
    if v.value.shape[0] != 1:
        raise ConfigError(f"tokenize expects a 1xd row, got {v.value.shape}")
    if d % token_len != 0:
        raise ConfigError(f"token_len {token_len} does not divide feature dim {d}")
    return ad.reshape(v, (d // token_len, token_len))


def select_top_k(probs: np.ndarray, top_k: int) -> np.ndarray:
    """Indices of the top_k largest probs per row; ties go to the lower index."""
    order = np.argsort(-probs, axis=1, kind="stable")
    return order[:, :top_k]


@dataclass
class RouteDecision:
    logits: np.ndarray
    probs: np.ndarray
    selected: np.ndarray
    gates: np.ndarray


def route(token: np.ndarray, router: np.ndarray, top_k: int) -> RouteDecision:
    """Reference single-token routing: softmax logits, top-k, raw-prob gates."""
    token = np.asarray(token, dtype=np.float64).reshape(1, -1)
    logits = token @ router
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    selected = select_top_k(probs, top_k)
    gates = probs[np.zeros(top_k, dtype=np.intp), selected[0]].reshape(1, top_k)
    return RouteDecision(logits=logits, probs=probs, selected=selected, gates=gates)


def moe_forward(v: ad.Node, cfg: MoEConfig, params) -> MoEOutput:
    """Run the expert block over all tokens of v (1 x d).

    `params` holds Nodes (lifted MoEParams). Tokens selecting the same
    expert are batched through one fused feed-forward call.
    """
    tokens = tokenize(v, cfg.token_len)
    num_tokens, d = tokens.value.shape[0], v.value.shape[1]

    logits = ad.matmul(tokens, params.router)  # [T, N]
    probs = ad.row_softmax(logits)
    selected = select_top_k(probs.value, cfg.top_k)  # [T, k]

    flat_rows = np.repeat(np.arange(num_tokens, dtype=np.intp), cfg.top_k)
    flat_cols = selected.ravel()
    gates = ad.gather_entries(probs, flat_rows, flat_cols)  # [T*k, 1]

    routed_sum: ad.Node | None = None
    for expert_idx in np.unique(flat_cols):
        pair_idx = np.flatnonzero(flat_cols == expert_idx)
        token_rows = flat_rows[pair_idx]
        ex = params.experts[expert_idx]
        out = ad.expert_ffn(ad.gather_rows(tokens, token_rows), ex.w1, ex.b1, ex.w2, ex.b2)
        scaled = ad.scale_rows(out, ad.gather_rows(gates, pair_idx))
        part = ad.scatter_rows(scaled, token_rows, num_tokens)
        routed_sum = part if routed_sum is None else ad.add(routed_sum, part)

    sh = params.shared
    shared_tokens = ad.expert_ffn(tokens, sh.w1, sh.b1, sh.w2, sh.b2)

    trace = RouterTrace(
        logits=logits.value.copy(),
        probs=probs.value.copy(),
        selected=selected,
        gates=gates.value.reshape(num_tokens, cfg.top_k).copy(),
        num_experts=cfg.num_experts,
        probs_node=probs,
    )
    return MoEOutput(
        routed=ad.reshape(routed_sum, (1, d)),
        shared=ad.reshape(shared_tokens, (1, d)),
        trace=trace,
        tokens=tokens,
        shared_tokens=shared_tokens,
    )
