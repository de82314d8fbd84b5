"""Full model: two bag encoders, two expert levels with shared experts, two
random-reorganization fusion stages, a bridge projection, and the per-bin
hazard head.

The first fusion stage emits a 1 x 4*d1 vector; a learned bridge maps it to
d2 so the second-level tokens, outputs, and the final fused vector all live
at the widths the architecture prescribes (V_inter and the level-2 shared
output are each 1 x d2, the head sees 1 x 2*d2).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import SampleRecord
from .encoder import EncoderParams, encode_bag, init_encoder_params
from .errors import ConfigError
from .moe import (
    ExpertParams,
    MoEConfig,
    MoEOutput,
    MoEParams,
    RouterTrace,
    init_moe_params,
    moe_forward,
)
from .rfr import RfrDraw, rfr_forward, valid_segments

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 64
    d1: int = 256
    d2: int = 512
    token_len_l1: int = 64
    token_len_l2: int = 32
    num_experts: int = 8
    top_k: int = 1
    expansion: int = 4
    num_bins: int = 4
    segment_values: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64, 128)

    def __post_init__(self):
        if min(self.d_in, self.d1, self.d2, self.num_bins) < 1:
            raise ConfigError("dimensions must be >= 1")
        if 2 * self.d1 != self.d2:
            raise ConfigError(f"2*d1 must equal d2 (decouple-loss consistency), got {self.d1}/{self.d2}")
        if self.d1 % self.token_len_l1 != 0:
            raise ConfigError(f"token_len_l1 {self.token_len_l1} does not divide d1 {self.d1}")
        if self.d2 % self.token_len_l2 != 0:
            raise ConfigError(f"token_len_l2 {self.token_len_l2} does not divide d2 {self.d2}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k must be in 1..{self.num_experts}")
        valid_segments(self.segment_values, self.d1)
        valid_segments(self.segment_values, self.d2)
        if self.d_att < 1:
            raise ConfigError("d1 too small for the attention head")

    @property
    def d_att(self) -> int:
        return max(self.d1 // 2, 1)

    @property
    def level1_moe(self) -> MoEConfig:
        return MoEConfig(self.num_experts, self.top_k, self.token_len_l1, self.expansion)

    @property
    def level2_moe(self) -> MoEConfig:
        return MoEConfig(self.num_experts, self.top_k, self.token_len_l2, self.expansion)


@dataclass
class HDMoEParams:
    encoder_a: EncoderParams
    encoder_b: EncoderParams
    level1_moe_a: MoEParams
    level1_moe_b: MoEParams
    bridge: np.ndarray  # [4*d1, d2]
    level2_moe: MoEParams
    head_w: np.ndarray  # [2*d2, K]
    head_b: np.ndarray  # [1, K]


@dataclass
class DecoupledFeatures:
    """The named vectors flowing through both levels (tape nodes)."""

    v_intra_a: ad.Node  # 1 x d1
    v_share_a: ad.Node  # 1 x d1
    v_intra_b: ad.Node  # 1 x d1
    v_share_b: ad.Node  # 1 x d1
    v_inter: ad.Node  # 1 x d2
    v_share_3: ad.Node  # 1 x d2
    v_f1: ad.Node  # 1 x 4*d1
    v_f1_proj: ad.Node  # 1 x d2
    v_f2: ad.Node  # 1 x 2*d2


@dataclass(frozen=True)
class HazardPrediction:
    hazards: np.ndarray  # [K] in [0, 1]
    survival: np.ndarray  # [K], S(j) = prod_{k<=j} (1 - h_k)
    risk: float


@dataclass
class ForwardResult:
    prediction: HazardPrediction
    features: DecoupledFeatures
    traces: tuple[RouterTrace, RouterTrace, RouterTrace]
    draws: tuple[RfrDraw, RfrDraw]
    hazards_node: ad.Node
    moe_a: MoEOutput = field(repr=False, default=None)
    moe_b: MoEOutput = field(repr=False, default=None)
    moe_inter: MoEOutput = field(repr=False, default=None)


def _uniform_init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(rows)
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> HDMoEParams:
    return HDMoEParams(
        encoder_a=init_encoder_params(cfg.d_in, cfg.d1, cfg.d_att, rng),
        encoder_b=init_encoder_params(cfg.d_in, cfg.d1, cfg.d_att, rng),
        level1_moe_a=init_moe_params(cfg.level1_moe, rng),
        level1_moe_b=init_moe_params(cfg.level1_moe, rng),
        bridge=_uniform_init(rng, 4 * cfg.d1, cfg.d2),
        level2_moe=init_moe_params(cfg.level2_moe, rng),
        head_w=_uniform_init(rng, 2 * cfg.d2, cfg.num_bins),
        head_b=np.zeros((1, cfg.num_bins)),
    )


def _named_encoder(prefix: str, p: EncoderParams):
    yield f"{prefix}.W_proj", p.w_proj
    yield f"{prefix}.V_att", p.v_att
    yield f"{prefix}.U_att", p.u_att
    yield f"{prefix}.w_att", p.w_att


def _named_expert(prefix: str, p: ExpertParams):
    yield f"{prefix}.W1", p.w1
    yield f"{prefix}.b1", p.b1
    yield f"{prefix}.W2", p.w2
    yield f"{prefix}.b2", p.b2


def _named_moe(prefix: str, p: MoEParams):
    yield f"{prefix}.router", p.router
    for j, ex in enumerate(p.experts):
        yield from _named_expert(f"{prefix}.expert{j}", ex)
    yield from _named_expert(f"{prefix}.shared", p.shared)


def named_params(params: HDMoEParams):
    """Deterministic (path, array) walk over every trainable matrix."""
    yield from _named_encoder("encoder_a", params.encoder_a)
    yield from _named_encoder("encoder_b", params.encoder_b)
    yield from _named_moe("level1_moe_a", params.level1_moe_a)
    yield from _named_moe("level1_moe_b", params.level1_moe_b)
    yield "bridge", params.bridge
    yield from _named_moe("level2_moe", params.level2_moe)
    yield "head.W", params.head_w
    yield "head.b", params.head_b


def parameter_count(params: HDMoEParams) -> tuple[int, dict[str, int]]:
    """Exact trainable scalar count, itemized by top-level submodule."""
    per_module: dict[str, int] = {}
    for path, arr in named_params(params):
        top = path.split(".")[0]
        per_module[top] = per_module.get(top, 0) + arr.size
    return sum(per_module.values()), per_module


def lift_params(
    params: HDMoEParams, requires_grad: bool = True
) -> tuple[HDMoEParams, dict[str, ad.Node]]:
    """Wrap every parameter array in a tape leaf; returns the node tree and a
    flat path->Node map for gradient readout."""
    nodes: dict[str, ad.Node] = {}

    def lift(path: str, arr: np.ndarray) -> ad.Node:
        node = ad.leaf(arr, requires_grad=requires_grad, name=path)
        nodes[path] = node
        return node

    def lift_encoder(prefix: str, p: EncoderParams) -> EncoderParams:
        return EncoderParams(
            w_proj=lift(f"{prefix}.W_proj", p.w_proj),
            v_att=lift(f"{prefix}.V_att", p.v_att),
            u_att=lift(f"{prefix}.U_att", p.u_att),
            w_att=lift(f"{prefix}.w_att", p.w_att),
        )

    def lift_expert(prefix: str, p: ExpertParams) -> ExpertParams:
        return ExpertParams(
            w1=lift(f"{prefix}.W1", p.w1),
            b1=lift(f"{prefix}.b1", p.b1),
            w2=lift(f"{prefix}.W2", p.w2),
            b2=lift(f"{prefix}.b2", p.b2),
        )

    def lift_moe(prefix: str, p: MoEParams) -> MoEParams:
        return MoEParams(
            router=lift(f"{prefix}.router", p.router),
            experts=[
                lift_expert(f"{prefix}.expert{j}", ex) for j, ex in enumerate(p.experts)
            ],
            shared=lift_expert(f"{prefix}.shared", p.shared),
        )

    lifted = HDMoEParams(
        encoder_a=lift_encoder("encoder_a", params.encoder_a),
        encoder_b=lift_encoder("encoder_b", params.encoder_b),
        level1_moe_a=lift_moe("level1_moe_a", params.level1_moe_a),
        level1_moe_b=lift_moe("level1_moe_b", params.level1_moe_b),
        bridge=lift("bridge", params.bridge),
        level2_moe=lift_moe("level2_moe", params.level2_moe),
        head_w=lift("head.W", params.head_w),
        head_b=lift("head.b", params.head_b),
    )
    return lifted, nodes


def risk_score(hazards: np.ndarray) -> float:
    """Negative expected number of bins survived; higher = earlier event."""
    survival = np.cumprod(1.0 - hazards)
    return float(-survival.sum())


def forward(
    sample: SampleRecord,
    params: HDMoEParams,
    cfg: ModelConfig,
    rng: np.random.Generator,
    pin_segments: tuple[int | None, int | None] = (None, None),
    requires_grad: bool = True,
    param_nodes: tuple[HDMoEParams, dict[str, ad.Node]] | None = None,
) -> ForwardResult:
    """One sample through the whole pipeline; returns values plus tape handles.

    Pass `param_nodes` (a prior lift_params result) to reuse leaves across
    calls within one step; otherwise the parameters are lifted fresh.
    """
    if param_nodes is None:
        lifted, _ = lift_params(params, requires_grad=requires_grad)
    else:
        lifted = param_nodes[0]

    v1 = encode_bag(sample.features_a, lifted.encoder_a)
    v2 = encode_bag(sample.features_b, lifted.encoder_b)

    l1_cfg = cfg.level1_moe
    out_a = moe_forward(v1, l1_cfg, lifted.level1_moe_a)
    out_b = moe_forward(v2, l1_cfg, lifted.level1_moe_b)

    v_f1, draw1 = rfr_forward(
        [out_a.routed, out_a.shared, out_b.routed, out_b.shared],
        cfg.segment_values,
        rng,
        pin_segment=pin_segments[0],
    )
    v_f1_proj = ad.matmul(v_f1, lifted.bridge)

    out_inter = moe_forward(v_f1_proj, cfg.level2_moe, lifted.level2_moe)

    v_f2, draw2 = rfr_forward(
        [out_inter.routed, out_inter.shared],
        cfg.segment_values,
        rng,
        pin_segment=pin_segments[1],
    )

    logits = ad.add_bias(ad.matmul(v_f2, lifted.head_w), lifted.head_b)
    hazards = ad.sigmoid(logits)

    h = hazards.value[0].copy()
    survival = np.cumprod(1.0 - h)
    prediction = HazardPrediction(hazards=h, survival=survival, risk=risk_score(h))

    features = DecoupledFeatures(
        v_intra_a=out_a.routed,
        v_share_a=out_a.shared,
        v_intra_b=out_b.routed,
        v_share_b=out_b.shared,
        v_inter=out_inter.routed,
        v_share_3=out_inter.shared,
        v_f1=v_f1,
        v_f1_proj=v_f1_proj,
        v_f2=v_f2,
    )
    return ForwardResult(
        prediction=prediction,
        features=features,
        traces=(out_a.trace, out_b.trace, out_inter.trace),
        draws=(draw1, draw2),
        hazards_node=hazards,
        moe_a=out_a,
        moe_b=out_b,
        moe_inter=out_inter,
    )


# ---------------------------------------------------------------------------
# checkpoints


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    rng = np.random.default_rng(0)
    return {path: arr.shape for path, arr in named_params(init_params(cfg, rng))}


def save_checkpoint(path: str | Path, params: HDMoEParams, meta: dict) -> None:
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta,
        "params": {
            p: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
            for p, arr in named_params(params)
        },
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh)


def load_checkpoint(path: str | Path, cfg: ModelConfig) -> tuple[HDMoEParams, dict]:
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    stored = blob["params"]
    expected = expected_shapes(cfg)
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise ConfigError(f"{path}: parameter set mismatch (missing {missing}, extra {extra})")
    arrays: dict[str, np.ndarray] = {}
    for p, entry in stored.items():
        shape = tuple(entry["shape"])
        if shape != expected[p]:
            raise ConfigError(f"{path}: {p} has shape {shape}, config expects {expected[p]}")
        arrays[p] = np.asarray(entry["data"], dtype=np.float64).reshape(shape)

    def enc(prefix: str) -> EncoderParams:
        return EncoderParams(
            w_proj=arrays[f"{prefix}.W_proj"],
            v_att=arrays[f"{prefix}.V_att"],
            u_att=arrays[f"{prefix}.U_att"],
            w_att=arrays[f"{prefix}.w_att"],
        )

    def expert(prefix: str) -> ExpertParams:
        return ExpertParams(
            w1=arrays[f"{prefix}.W1"],
            b1=arrays[f"{prefix}.b1"],
            w2=arrays[f"{prefix}.W2"],
            b2=arrays[f"{prefix}.b2"],
        )

    def moe(prefix: str) -> MoEParams:
        return MoEParams(
            router=arrays[f"{prefix}.router"],
            experts=[expert(f"{prefix}.expert{j}") for j in range(cfg.num_experts)],
            shared=expert(f"{prefix}.shared"),
        )

    params = HDMoEParams(
        encoder_a=enc("encoder_a"),
        encoder_b=enc("encoder_b"),
        level1_moe_a=moe("level1_moe_a"),
        level1_moe_b=moe("level1_moe_b"),
        bridge=arrays["bridge"],
        level2_moe=moe("level2_moe"),
        head_w=arrays["head.W"],
        head_b=arrays["head.b"],
    )
    return params, blob.get("meta", {})
