"""
Toy decoder-only transformer built on the nitplab autodiff core.

Pre-norm blocks with causal grouped-query attention and either a dense SwiGLU
FFN or a top-k mixture of SwiGLU experts. The forward pass returns the logits
together with an ``ActivationTrace`` holding every post-block residual state,
which is where implicit tokens are read from.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .configs.model_config import FfnKind, ModelConfig
from .tensor import (
    Tensor,
    add,
    add_n,
    concat_columns,
    matmul,
    mul_rows,
    rmsnorm,
    scale,
    scatter_rows,
    slice_columns,
    softmax,
    swiglu,
    take_column,
    take_rows,
    transpose,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass
class SwiGLUWeights:
    """Gate, up and down projections of one SwiGLU block."""
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return swiglu(x, self.w_gate, self.w_up, self.w_down)

    @property
    def hidden_dim(self) -> int:
        return self.w_gate.shape[1]


@dataclass
class ActivationTrace:
    """
    Hidden states of one forward pass.

    Attributes:
        layers: L+1 post-block residual states, T×d each; index 0 is the
                embedding output (token plus position embeddings)
        final: Post-final-norm states H_final, the rows multiplied by the unembedding
        router_entropy: Mean routing entropy per MoE layer (empty for dense models)
    """
    layers: List[Tensor]
    final: Tensor
    router_entropy: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def num_layers(self) -> int:
        return len(self.layers) - 1


def count_parameters(config: ModelConfig) -> int:
    """Closed-form parameter count of ``build_model(config)``."""
    d, V, L = config.hidden_dim, config.vocab_size, config.num_layers
    kv = config.num_kv_heads * config.head_dim
    attention = 2 * d * d + 2 * d * kv
    if config.ffn_kind == FfnKind.MOE:
        ffn = d * config.num_experts + config.num_experts * 3 * d * config.expert_ffn_dim
    else:
        ffn = 3 * d * config.dense_ffn_dim
    per_layer = attention + ffn + 2 * d
    return V * d + config.max_seq_len * d + L * per_layer + d + V * d


class Model:
    """Parameters θ of the toy transformer, keyed by stable names."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, tokens) -> Tuple[Tensor, ActivationTrace]:
        return forward(self, tokens)

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Overwrite every parameter with a same-shape array (copied as float64)."""
        missing = set(self.params) - set(arrays)
        unexpected = set(arrays) - set(self.params)
        if missing or unexpected:
            raise KeyError(f"Parameter names differ: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in self.params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"Parameter '{name}' has shape {p.shape}, got {value.shape}")
            p.values = value.copy()

    def layer_params(self, index: int) -> Dict[str, Tensor]:
        prefix = f"layers.{index}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def swiglu_weights(self, prefix: str) -> SwiGLUWeights:
        return SwiGLUWeights(
            self.params[f"{prefix}.w_gate"], self.params[f"{prefix}.w_up"], self.params[f"{prefix}.w_down"]
        )

    def experts(self, index: int) -> List[SwiGLUWeights]:
        return [
            self.swiglu_weights(f"layers.{index}.experts.{e}") for e in range(self.config.num_experts)
        ]


def build_model(config: ModelConfig, init_seed: Optional[int] = None) -> Model:
    """
    Initialize a model: normal(0, 0.02) matrices, unit gains, no biases.

    Args:
        config: Validated architecture
        init_seed: Overrides ``config.seed`` when given

    Returns:
        Model with freshly initialized parameters
    """
    seed = config.seed if init_seed is None else init_seed
    rng = np.random.default_rng(seed)
    d = config.hidden_dim
    kv = config.num_kv_heads * config.head_dim
    params: Dict[str, Tensor] = {}

    def matrix(name: str, rows: int, cols: int) -> None:
        params[name] = Tensor(rng.normal(0.0, INIT_STD, size=(rows, cols)), requires_grad=True)

    def gain(name: str) -> None:
        params[name] = Tensor(np.ones(d), requires_grad=True)

    matrix("tok_embedding", config.vocab_size, d)
    matrix("pos_embedding", config.max_seq_len, d)
    for i in range(config.num_layers):
        p = f"layers.{i}"
        gain(f"{p}.attn_norm")
        matrix(f"{p}.wq", d, d)
        matrix(f"{p}.wk", d, kv)
        matrix(f"{p}.wv", d, kv)
        matrix(f"{p}.wo", d, d)
        gain(f"{p}.ffn_norm")
        if config.ffn_kind == FfnKind.MOE:
            matrix(f"{p}.router", d, config.num_experts)
            for e in range(config.num_experts):
                matrix(f"{p}.experts.{e}.w_gate", d, config.expert_ffn_dim)
                matrix(f"{p}.experts.{e}.w_up", d, config.expert_ffn_dim)
                matrix(f"{p}.experts.{e}.w_down", config.expert_ffn_dim, d)
        else:
            matrix(f"{p}.ffn.w_gate", d, config.dense_ffn_dim)
            matrix(f"{p}.ffn.w_up", d, config.dense_ffn_dim)
            matrix(f"{p}.ffn.w_down", config.dense_ffn_dim, d)
    gain("final_norm")
    matrix("unembedding", config.vocab_size, d)

    model = Model(config, params)
    logger.debug(f"Built {config} with {model.num_parameters()} parameters (seed {seed})")
    return model


def causal_attention(x: Tensor, params: Dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Grouped-query causal self-attention over a T×d input."""
    n_pos = x.shape[0]
    hd = config.head_dim
    group = config.num_q_heads // config.num_kv_heads
    q = matmul(x, params["wq"])
    k = matmul(x, params["wk"])
    v = matmul(x, params["wv"])
    mask = np.tril(np.ones((n_pos, n_pos), dtype=bool))
    inv_sqrt = 1.0 / np.sqrt(hd)

    heads = []
    for h in range(config.num_q_heads):
        g = h // group
        q_h = slice_columns(q, h * hd, (h + 1) * hd)
        k_h = slice_columns(k, g * hd, (g + 1) * hd)
        v_h = slice_columns(v, g * hd, (g + 1) * hd)
        probs = softmax(scale(matmul(q_h, transpose(k_h)), inv_sqrt), mask)
        heads.append(matmul(probs, v_h))
    return matmul(concat_columns(heads), params["wo"])


def route_top_k(gate_logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean T×E mask of each row's k largest gate logits (ties go to the lower index)."""
    order = np.argsort(-gate_logits, axis=1, kind="stable")[:, :k]
    mask = np.zeros(gate_logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def router_entropy(gate_logits: np.ndarray) -> float:
    """Mean entropy (nats) of the full router distribution over tokens."""
    shifted = gate_logits - gate_logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    return float(-plogp.sum(axis=1).mean())


def moe_ffn(x: Tensor, experts: Sequence[SwiGLUWeights], gate: Tensor, k: int) -> Tensor:
    """
    Top-k mixture of SwiGLU experts.

    Each token is sent to the k experts with the largest gate logits; their
    outputs are weighted by a softmax renormalized over the selected experts.
    Experts nobody routes to are not evaluated and contribute exactly zero.

    Args:
        x: T×d input
        experts: E expert weight sets
        gate: d×E router matrix
        k: Experts per token

    Raises:
        ValueError: If k is not in [1, E]
    """
    n_experts = len(experts)
    if gate.shape != (x.shape[1], n_experts):
        raise ValueError(f"moe_ffn: gate shape {gate.shape} does not match input {x.shape} and {n_experts} experts")
    if not 1 <= k <= n_experts:
        raise ValueError(f"moe_ffn: k={k} outside [1, {n_experts}]")
    n_pos = x.shape[0]
    logits = matmul(x, gate)
    selected = route_top_k(logits.values, k)
    weights = softmax(logits, selected)

    parts = []
    for e, expert in enumerate(experts):
        rows = np.flatnonzero(selected[:, e])
        if rows.size == 0:
            continue
        out = scatter_rows(expert(take_rows(x, rows)), rows, n_pos)
        parts.append(mul_rows(out, take_column(weights, e)))
    logger.debug(f"Routed {n_pos} tokens, expert loads {selected.sum(axis=0).tolist()}")
    return add_n(parts)


def forward(model: Model, tokens) -> Tuple[Tensor, ActivationTrace]:
    """
    Run the model on one token sequence.

    Args:
        model: Model to evaluate
        tokens: T token ids, T ≤ max_seq_len

    Returns:
        (T×V logits, activation trace)

    Raises:
        ValueError: If the sequence is empty or too long
        IndexError: If a token id is outside [0, V)
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError(f"forward expects a non-empty 1-D token sequence, got shape {tokens.shape}")
    if tokens.size > cfg.max_seq_len:
        raise ValueError(f"Sequence length {tokens.size} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise IndexError(f"Token id out of range [0, {cfg.vocab_size})")

    p = model.params
    x = add(take_rows(p["tok_embedding"], tokens), take_rows(p["pos_embedding"], np.arange(tokens.size)))
    layers = [x]
    entropies: List[float] = []
    for i in range(cfg.num_layers):
        lp = model.layer_params(i)
        x = add(x, causal_attention(rmsnorm(x, lp["attn_norm"]), lp, cfg))
        h = rmsnorm(x, lp["ffn_norm"])
        if cfg.ffn_kind == FfnKind.MOE:
            entropies.append(router_entropy(h.values @ lp["router"].values))
            ffn_out = moe_ffn(h, model.experts(i), lp["router"], cfg.experts_per_token)
        else:
            ffn_out = model.swiglu_weights(f"layers.{i}.ffn")(h)
        x = add(x, ffn_out)
        layers.append(x)

    final = rmsnorm(x, p["final_norm"])
    logits = matmul(final, transpose(p["unembedding"]))
    return logits, ActivationTrace(layers=layers, final=final, router_entropy=entropies)
