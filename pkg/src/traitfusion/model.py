"""The text-centric trait fusion network and its ablation variants.

Blocks: chunk-wise projectors (per-modality dimensionality reduction over
independent feature chunks), cross-modal attention connectors (text queries,
audio/video keys and values), a gated text-feature enhancer with a residual
to the raw text feature, and an ensemble regression head averaging many
small MLP regressors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .tensor import ParamTensor, RngState, ShapeError, Tensor, init_weight, no_grad

__all__ = [
    "TRAITS", "TRAIT_NAMES", "ABLATION_MODES", "ConfigError",
    "ChunkProjectorConfig", "ConnectorConfig", "EnhancerConfig", "ModelConfig",
    "build_model_config", "single_projector_config",
    "TraitFusionModel", "build_ablation_model", "ablation_forward",
]

TRAITS = ("H", "E", "A", "C")
TRAIT_NAMES = {
    "H": "Honesty-Humility",
    "E": "Extraversion",
    "A": "Agreeableness",
    "C": "Conscientiousness",
}

ABLATION_MODES = ("full", "concat", "cmc-only", "tfe-only", "single-projector", "single-head")


class ConfigError(ValueError):
    pass


def _check_prob(p: float, what: str) -> None:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"{what} must lie in [0, 1), got {p}")


@dataclass(frozen=True)
class ChunkProjectorConfig:
    """Split a width-D vector into N chunks and project each independently."""

    input_dim: int
    num_chunks: int
    hidden_dim: int
    chunk_out_dim: int
    dropout_p: float = 0.2
    outer_relu: bool = True  # second ReLU around W2, as printed; flag drops it

    def __post_init__(self):
        for name in ("input_dim", "num_chunks", "hidden_dim", "chunk_out_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"chunk projector {name} must be positive")
        if self.input_dim % self.num_chunks != 0:
            raise ConfigError(
                f"num_chunks={self.num_chunks} does not divide input_dim={self.input_dim}"
            )
        _check_prob(self.dropout_p, "chunk projector dropout_p")

    @property
    def chunk_width(self) -> int:
        return self.input_dim // self.num_chunks

    @property
    def output_dim(self) -> int:
        return self.num_chunks * self.chunk_out_dim

    @property
    def param_count(self) -> int:
        per_chunk = (
            self.chunk_width * self.hidden_dim + self.hidden_dim
            + self.hidden_dim * self.chunk_out_dim + self.chunk_out_dim
            + 2 * self.chunk_out_dim
        )
        return self.num_chunks * per_chunk


@dataclass(frozen=True)
class ConnectorConfig:
    """Multi-head attention: one query token from text, kv tokens from the
    other modality's chunk structure."""

    query_dim: int
    key_dim: int
    kv_tokens: int
    output_dim: int
    num_heads: int
    dropout_p: float = 0.3

    def __post_init__(self):
        for name in ("query_dim", "key_dim", "kv_tokens", "output_dim", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"connector {name} must be positive")
        if self.output_dim % self.num_heads != 0:
            raise ConfigError(
                f"num_heads={self.num_heads} does not divide output_dim={self.output_dim}"
            )
        if self.key_dim % self.kv_tokens != 0:
            raise ConfigError(
                f"kv_tokens={self.kv_tokens} does not divide key_dim={self.key_dim}"
            )
        _check_prob(self.dropout_p, "connector dropout_p")

    @property
    def head_dim(self) -> int:
        return self.output_dim // self.num_heads

    @property
    def token_width(self) -> int:
        return self.key_dim // self.kv_tokens


@dataclass(frozen=True)
class EnhancerConfig:
    """Gated convex fusion of the two attended features and the text feature."""

    model_dim: int
    dropout_p: float = 0.1
    gate_mode: str = "softmax-gates"

    def __post_init__(self):
        if self.model_dim < 1:
            raise ConfigError("enhancer model_dim must be positive")
        if self.gate_mode != "softmax-gates":
            raise ConfigError(f"unknown gate mode {self.gate_mode!r}")
        _check_prob(self.dropout_p, "enhancer dropout_p")


@dataclass(frozen=True)
class ModelConfig:
    trait: str
    text: ChunkProjectorConfig
    audio: ChunkProjectorConfig
    video: ChunkProjectorConfig
    audio_text: ConnectorConfig
    video_text: ConnectorConfig
    enhancer: EnhancerConfig
    ensemble_size: int = 32
    head_hidden: tuple[int, int] = (128, 64)

    def __post_init__(self):
        if self.trait not in TRAITS:
            raise ConfigError(f"trait must be one of {TRAITS}, got {self.trait!r}")
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be >= 1")
        if len(self.head_hidden) != 2 or any(h < 1 for h in self.head_hidden):
            raise ConfigError(f"head_hidden must be two positive ints, got {self.head_hidden}")
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))
        for cname, conn, proj in (
            ("audio_text", self.audio_text, self.audio),
            ("video_text", self.video_text, self.video),
        ):
            if conn.query_dim != self.text.output_dim:
                raise ConfigError(
                    f"{cname} query_dim {conn.query_dim} != text projector output "
                    f"{self.text.output_dim}"
                )
            if conn.key_dim != proj.output_dim:
                raise ConfigError(
                    f"{cname} key_dim {conn.key_dim} != {cname.split('_')[0]} projector "
                    f"output {proj.output_dim}"
                )
            if conn.kv_tokens != proj.num_chunks:
                raise ConfigError(
                    f"{cname} kv_tokens {conn.kv_tokens} != projector chunk count "
                    f"{proj.num_chunks}"
                )
            if conn.output_dim != self.enhancer.model_dim:
                raise ConfigError(
                    f"{cname} output_dim {conn.output_dim} != enhancer model_dim "
                    f"{self.enhancer.model_dim}"
                )
        if self.text.output_dim != self.enhancer.model_dim:
            raise ConfigError(
                f"text projector output {self.text.output_dim} must equal enhancer "
                f"model_dim {self.enhancer.model_dim} (residual widths must match)"
            )

    # -- lossless dict round trip (checkpoint manifest) ---------------------

    def to_dict(self) -> dict:
        def proj(c: ChunkProjectorConfig) -> dict:
            return {
                "input_dim": c.input_dim, "num_chunks": c.num_chunks,
                "hidden_dim": c.hidden_dim, "chunk_out_dim": c.chunk_out_dim,
                "dropout_p": c.dropout_p, "outer_relu": c.outer_relu,
            }

        def conn(c: ConnectorConfig) -> dict:
            return {
                "query_dim": c.query_dim, "key_dim": c.key_dim, "kv_tokens": c.kv_tokens,
                "output_dim": c.output_dim, "num_heads": c.num_heads, "dropout_p": c.dropout_p,
            }

        return {
            "trait": self.trait,
            "text": proj(self.text), "audio": proj(self.audio), "video": proj(self.video),
            "audio_text": conn(self.audio_text), "video_text": conn(self.video_text),
            "enhancer": {
                "model_dim": self.enhancer.model_dim,
                "dropout_p": self.enhancer.dropout_p,
                "gate_mode": self.enhancer.gate_mode,
            },
            "ensemble_size": self.ensemble_size,
            "head_hidden": list(self.head_hidden),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            trait=d["trait"],
            text=ChunkProjectorConfig(**d["text"]),
            audio=ChunkProjectorConfig(**d["audio"]),
            video=ChunkProjectorConfig(**d["video"]),
            audio_text=ConnectorConfig(**d["audio_text"]),
            video_text=ConnectorConfig(**d["video_text"]),
            enhancer=EnhancerConfig(**d["enhancer"]),
            ensemble_size=d["ensemble_size"],
            head_hidden=tuple(d["head_hidden"]),
        )

    def with_dropout(self, cwp: float | None = None, cmc: float | None = None,
                     tfe: float | None = None) -> "ModelConfig":
        """Copy with per-block dropout overrides (None keeps the current value)."""
        out = self
        if cwp is not None:
            out = replace(
                out,
                text=replace(out.text, dropout_p=cwp),
                audio=replace(out.audio, dropout_p=cwp),
                video=replace(out.video, dropout_p=cwp),
            )
        if cmc is not None:
            out = replace(
                out,
                audio_text=replace(out.audio_text, dropout_p=cmc),
                video_text=replace(out.video_text, dropout_p=cmc),
            )
        if tfe is not None:
            out = replace(out, enhancer=replace(out.enhancer, dropout_p=tfe))
        return out


def build_model_config(
    trait: str,
    *,
    text_dim: int = 4096,
    audio_dim: int = 768,
    video_dim: int = 768,
    text_chunks: int = 32,
    audio_chunks: int = 8,
    video_chunks: int = 8,
    text_chunk_out: int | None = None,
    audio_chunk_out: int | None = None,
    video_chunk_out: int | None = None,
    cwp_hidden: int = 64,
    model_dim: int = 256,
    heads: int = 8,
    ensemble_size: int = 32,
    head_hidden: tuple[int, int] = (128, 64),
    dropout_cwp: float = 0.2,
    dropout_cmc: float = 0.3,
    dropout_tfe: float = 0.1,
    outer_relu: bool = True,
) -> ModelConfig:
    """Assemble a consistent ModelConfig from flat hyperparameters.

    Unless given explicitly, per-chunk output widths are chosen so every
    projector lands on model_dim (the text path must; audio/video then share
    the same width by default).
    """
    if text_chunk_out is None:
        if model_dim % text_chunks != 0:
            raise ConfigError(f"text_chunks={text_chunks} does not divide model_dim={model_dim}")
        text_chunk_out = model_dim // text_chunks
    # audio/video widths are free (they only feed the connectors' kv side)
    if audio_chunk_out is None:
        audio_chunk_out = max(1, model_dim // audio_chunks)
    if video_chunk_out is None:
        video_chunk_out = max(1, model_dim // video_chunks)

    text = ChunkProjectorConfig(text_dim, text_chunks, cwp_hidden, text_chunk_out,
                                dropout_cwp, outer_relu)
    audio = ChunkProjectorConfig(audio_dim, audio_chunks, cwp_hidden, audio_chunk_out,
                                 dropout_cwp, outer_relu)
    video = ChunkProjectorConfig(video_dim, video_chunks, cwp_hidden, video_chunk_out,
                                 dropout_cwp, outer_relu)
    return ModelConfig(
        trait=trait,
        text=text, audio=audio, video=video,
        audio_text=ConnectorConfig(text.output_dim, audio.output_dim, audio.num_chunks,
                                   model_dim, heads, dropout_cmc),
        video_text=ConnectorConfig(text.output_dim, video.output_dim, video.num_chunks,
                                   model_dim, heads, dropout_cmc),
        enhancer=EnhancerConfig(model_dim, dropout_tfe),
        ensemble_size=ensemble_size,
        head_hidden=tuple(head_hidden),
    )


def single_projector_config(cfg: ChunkProjectorConfig) -> ChunkProjectorConfig:
    """N=1 projector over the whole vector with hidden width chosen to match
    the chunk-wise parameter count (within 5% on non-degenerate sizes)."""
    target = cfg.param_count
    d_in, d_out = cfg.input_dim, cfg.output_dim
    base = round((target - 3 * d_out) / (d_in + 1 + d_out))
    best = None
    for h1 in (base - 1, base, base + 1):
        if h1 < 1:
            continue
        count = ChunkProjectorConfig(d_in, 1, h1, d_out, cfg.dropout_p, cfg.outer_relu).param_count
        err = abs(count - target) / target
        if best is None or err < best[0]:
            best = (err, h1)
    return ChunkProjectorConfig(d_in, 1, best[1], d_out, cfg.dropout_p, cfg.outer_relu)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


class _ParamStore:
    """Ordered, unique-name parameter registry for one model."""

    def __init__(self):
        self._params: dict[str, ParamTensor] = {}

    def add(self, param: ParamTensor) -> ParamTensor:
        if param.name in self._params:
            raise ConfigError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def weight(self, name: str, fan_in: int, fan_out: int, rng: RngState) -> ParamTensor:
        return self.add(ParamTensor(name, init_weight(rng, fan_in, fan_out)))

    def zeros(self, name: str, *shape: int) -> ParamTensor:
        return self.add(ParamTensor(name, np.zeros(shape)))

    def ones(self, name: str, *shape: int) -> ParamTensor:
        return self.add(ParamTensor(name, np.ones(shape)))

    def all(self) -> list[ParamTensor]:
        return list(self._params.values())

    def by_name(self) -> dict[str, ParamTensor]:
        return dict(self._params)


class ChunkProjector:
    def __init__(self, prefix: str, cfg: ChunkProjectorConfig, store: _ParamStore, rng: RngState):
        self.cfg = cfg
        self.chunks = []
        d, h, dp = cfg.chunk_width, cfg.hidden_dim, cfg.chunk_out_dim
        for i in range(cfg.num_chunks):
            p = f"{prefix}.chunk{i}"
            self.chunks.append({
                "W1": store.weight(f"{p}.W1", d, h, rng),
                "b1": store.zeros(f"{p}.b1", h),
                "W2": store.weight(f"{p}.W2", h, dp, rng),
                "b2": store.zeros(f"{p}.b2", dp),
                "ln_gain": store.ones(f"{p}.ln.gain", dp),
                "ln_bias": store.zeros(f"{p}.ln.bias", dp),
            })

    def forward(self, x: Tensor, rng: RngState | None, training: bool) -> Tensor:
        cfg = self.cfg
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ShapeError(
                f"chunk projector expects (B, {cfg.input_dim}), got {x.shape}"
            )
        pieces = ops.split_lastdim(x, [cfg.chunk_width] * cfg.num_chunks)
        outs = []
        for piece, p in zip(pieces, self.chunks):
            z = ops.relu(ops.linear(piece, p["W1"], p["b1"]))
            z = ops.linear(z, p["W2"], p["b2"])
            if cfg.outer_relu:
                z = ops.relu(z)
            z = ops.layernorm(z, p["ln_gain"], p["ln_bias"])
            z = ops.dropout(z, cfg.dropout_p, rng, training)
            outs.append(z)
        return ops.concat_lastdim(outs)


class CrossModalConnector:
    def __init__(self, prefix: str, cfg: ConnectorConfig, store: _ParamStore, rng: RngState):
        self.cfg = cfg
        w = cfg.token_width
        self.Wq = store.weight(f"{prefix}.Wq", cfg.query_dim, cfg.output_dim, rng)
        self.bq = store.zeros(f"{prefix}.bq", cfg.output_dim)
        self.Wk = store.weight(f"{prefix}.Wk", w, cfg.output_dim, rng)
        self.bk = store.zeros(f"{prefix}.bk", cfg.output_dim)
        self.Wv = store.weight(f"{prefix}.Wv", w, cfg.output_dim, rng)
        self.bv = store.zeros(f"{prefix}.bv", cfg.output_dim)
        self.Wo = store.weight(f"{prefix}.Wo", cfg.output_dim, cfg.output_dim, rng)
        self.bo = store.zeros(f"{prefix}.bo", cfg.output_dim)
        self.ln_gain = store.ones(f"{prefix}.ln.gain", cfg.output_dim)
        self.ln_bias = store.zeros(f"{prefix}.ln.bias", cfg.output_dim)

    def forward(self, x_query: Tensor, x_kv: Tensor, rng: RngState | None, training: bool,
                trace: dict | None = None, trace_key: str = "attention") -> Tensor:
        cfg = self.cfg
        if x_query.ndim != 2 or x_query.shape[1] != cfg.query_dim:
            raise ShapeError(f"connector expects queries (B, {cfg.query_dim}), got {x_query.shape}")
        if x_kv.ndim != 2 or x_kv.shape[1] != cfg.key_dim:
            raise ShapeError(f"connector expects keys (B, {cfg.key_dim}), got {x_kv.shape}")
        B = x_query.shape[0]
        T, w = cfg.kv_tokens, cfg.token_width
        H, dh = cfg.num_heads, cfg.head_dim

        q = ops.linear(x_query, self.Wq, self.bq)            # (B, H*dh), heads contiguous
        tokens = ops.reshape(x_kv, (B * T, w))               # chunk tokens, batch-major

        def fold_heads(y: Tensor) -> Tensor:
            y = ops.reshape(y, (B, T, H, dh))
            y = ops.transpose(y, (0, 2, 1, 3))
            return ops.reshape(y, (B * H, T, dh))

        k = fold_heads(ops.linear(tokens, self.Wk, self.bk))
        v = fold_heads(ops.linear(tokens, self.Wv, self.bv))

        scores = ops.matmul(k, ops.reshape(q, (B * H, dh, 1)))     # (B*H, T, 1)
        scores = ops.scale(ops.reshape(scores, (B * H, T)), 1.0 / math.sqrt(dh))
        alpha = ops.softmax(scores)                                # (B*H, T)
        if trace is not None:
            trace[trace_key] = alpha.to_numpy().reshape(B, H, T)

        ctx = ops.matmul(ops.reshape(alpha, (B * H, 1, T)), v)     # (B*H, 1, dh)
        ctx = ops.reshape(ctx, (B, H * dh))                        # heads concatenated
        out = ops.linear(ctx, self.Wo, self.bo)
        out = ops.dropout(out, cfg.dropout_p, rng, training)
        return ops.layernorm(out, self.ln_gain, self.ln_bias)


class TextFeatureEnhancer:
    def __init__(self, prefix: str, cfg: EnhancerConfig, store: _ParamStore, rng: RngState):
        self.cfg = cfg
        m = cfg.model_dim
        self.Wat = store.weight(f"{prefix}.Wat", m, m, rng)
        self.bat = store.zeros(f"{prefix}.bat", m)
        self.Wvt = store.weight(f"{prefix}.Wvt", m, m, rng)
        self.bvt = store.zeros(f"{prefix}.bvt", m)
        self.Wt = store.weight(f"{prefix}.Wt", m, m, rng)
        self.bt = store.zeros(f"{prefix}.bt", m)
        self.gate_W = store.weight(f"{prefix}.gate.W", 3 * m, 3, rng)
        self.gate_b = store.zeros(f"{prefix}.gate.b", 3)
        self.ln_gain = store.ones(f"{prefix}.ln.gain", m)
        self.ln_bias = store.zeros(f"{prefix}.ln.bias", m)

    def forward(self, x_at: Tensor, x_vt: Tensor, x_t: Tensor, rng: RngState | None,
                training: bool, trace: dict | None = None) -> Tensor:
        m = self.cfg.model_dim
        for name, t in (("x_at", x_at), ("x_vt", x_vt), ("x_t", x_t)):
            if t.ndim != 2 or t.shape[1] != m:
                raise ShapeError(f"enhancer expects {name} of width {m}, got {t.shape}")
        at_hat = ops.linear(x_at, self.Wat, self.bat)
        vt_hat = ops.linear(x_vt, self.Wvt, self.bvt)
        t_hat = ops.linear(x_t, self.Wt, self.bt)

        logits = ops.linear(ops.concat_lastdim([at_hat, vt_hat, t_hat]), self.gate_W, self.gate_b)
        gates = ops.softmax(logits)                              # (B, 3), convex weights
        if trace is not None:
            trace["gates"] = gates.to_numpy()
        g1, g2, g3 = ops.split_lastdim(gates, [1, 1, 1])
        fused = ops.add(
            ops.add(ops.scale_rows(at_hat, g1), ops.scale_rows(vt_hat, g2)),
            ops.scale_rows(t_hat, g3),
        )
        out = ops.add(x_t, ops.dropout(fused, self.cfg.dropout_p, rng, training))
        return ops.layernorm(out, self.ln_gain, self.ln_bias)


class EnsembleHead:
    """Mean of `size` independent 3-layer MLP regressors (ReLU after 1 and 2)."""

    def __init__(self, prefix: str, input_dim: int, hidden: tuple[int, int], size: int,
                 store: _ParamStore, rng: RngState):
        self.size = size
        h1, h2 = hidden
        self.subnets = []
        for k in range(size):
            p = f"{prefix}.sub{k}"
            self.subnets.append({
                "W1": store.weight(f"{p}.fc1.W", input_dim, h1, rng),
                "b1": store.zeros(f"{p}.fc1.b", h1),
                "W2": store.weight(f"{p}.fc2.W", h1, h2, rng),
                "b2": store.zeros(f"{p}.fc2.b", h2),
                "W3": store.weight(f"{p}.fc3.W", h2, 1, rng),
                "b3": store.zeros(f"{p}.fc3.b", 1),
            })

    def forward(self, x: Tensor) -> Tensor:
        outs = []
        for p in self.subnets:
            z = ops.relu(ops.linear(x, p["W1"], p["b1"]))
            z = ops.relu(ops.linear(z, p["W2"], p["b2"]))
            outs.append(ops.linear(z, p["W3"], p["b3"]))          # (B, 1)
        return ops.mean_lastdim(ops.concat_lastdim(outs))          # (B,)


# ---------------------------------------------------------------------------
# Whole model
# ---------------------------------------------------------------------------


class TraitFusionModel:
    """One trait-regressor: projectors -> connectors -> enhancer -> head.

    `variant` selects the ablation wiring; "full" is the complete network.
    A model instance is single-writer during training; frozen parameters may
    be read concurrently.
    """

    def __init__(self, cfg: ModelConfig, rng: RngState, variant: str = "full"):
        if variant not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {variant!r}; valid: {ABLATION_MODES}")
        self.cfg = cfg
        self.variant = variant
        self._store = _ParamStore()
        store = self._store

        if variant == "single-projector":
            text_cfg = single_projector_config(cfg.text)
            audio_cfg = single_projector_config(cfg.audio)
            video_cfg = single_projector_config(cfg.video)
        else:
            text_cfg, audio_cfg, video_cfg = cfg.text, cfg.audio, cfg.video
        self.cwp_text = ChunkProjector("cwp.text", text_cfg, store, rng)
        self.cwp_audio = ChunkProjector("cwp.audio", audio_cfg, store, rng)
        self.cwp_video = ChunkProjector("cwp.video", video_cfg, store, rng)

        m = cfg.enhancer.model_dim
        self.cmc_audio = self.cmc_video = None
        self.tfe = None
        self.fuse_W = self.fuse_b = None
        self.proj_audio = self.proj_video = None

        if variant in ("full", "single-projector", "single-head", "cmc-only"):
            # single-projector keeps the attention token layout so only the
            # projector parameterization differs from the full model
            self.cmc_audio = CrossModalConnector("cmc.audio", cfg.audio_text, store, rng)
            self.cmc_video = CrossModalConnector("cmc.video", cfg.video_text, store, rng)
        if variant in ("full", "single-projector", "single-head", "tfe-only"):
            self.tfe = TextFeatureEnhancer("tfe", cfg.enhancer, store, rng)
        if variant == "cmc-only":
            self.fuse_W = store.weight("fuse.W", 2 * m, m, rng)
            self.fuse_b = store.zeros("fuse.b", m)
        if variant == "tfe-only":
            self.proj_audio = (
                store.weight("proj.audio.W", cfg.audio.output_dim, m, rng),
                store.zeros("proj.audio.b", m),
            )
            self.proj_video = (
                store.weight("proj.video.W", cfg.video.output_dim, m, rng),
                store.zeros("proj.video.b", m),
            )

        if variant == "concat":
            head_in = text_cfg.output_dim + audio_cfg.output_dim + video_cfg.output_dim
        else:
            head_in = m
        head_size = 1 if variant == "single-head" else cfg.ensemble_size
        self.head = EnsembleHead("head", head_in, cfg.head_hidden, head_size, store, rng)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[ParamTensor]:
        return self._store.all()

    def param_dict(self) -> dict[str, ParamTensor]:
        return self._store.by_name()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def param_arrays(self) -> dict[str, np.ndarray]:
        """Detached copies of all parameter values, in registration order."""
        return {p.name: np.array(p.value.array) for p in self.parameters()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self._store.by_name()
        if set(arrays) != set(own):
            missing = set(own) - set(arrays)
            extra = set(arrays) - set(own)
            raise ConfigError(
                f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, arr in arrays.items():
            own[name].assign(arr)

    # -- forward ------------------------------------------------------------

    def forward(self, text: Tensor, audio: Tensor, video: Tensor,
                rng: RngState | None = None, training: bool = False,
                trace: dict | None = None) -> Tensor:
        """Per-sample trait score predictions, shape (B,)."""
        text, audio, video = ops._t(text), ops._t(audio), ops._t(video)
        if not (text.ndim == audio.ndim == video.ndim == 2):
            raise ShapeError(
                f"model inputs must be 2-D batches, got {text.shape}, {audio.shape}, {video.shape}"
            )
        if not (text.shape[0] == audio.shape[0] == video.shape[0]):
            raise ShapeError(
                f"batch sizes differ: {text.shape}, {audio.shape}, {video.shape}"
            )
        if training and rng is None:
            raise ValueError("training-mode forward needs an RngState for dropout")

        z_t = self.cwp_text.forward(text, rng, training)
        z_a = self.cwp_audio.forward(audio, rng, training)
        z_v = self.cwp_video.forward(video, rng, training)

        v = self.variant
        if v == "concat":
            return self.head.forward(ops.concat_lastdim([z_t, z_a, z_v]))
        if v == "cmc-only":
            x_at = self.cmc_audio.forward(z_t, z_a, rng, training, trace, "attention_audio")
            x_vt = self.cmc_video.forward(z_t, z_v, rng, training, trace, "attention_video")
            fused = ops.linear(ops.concat_lastdim([x_at, x_vt]), self.fuse_W, self.fuse_b)
            return self.head.forward(fused)
        if v == "tfe-only":
            a_stand = ops.linear(z_a, *self.proj_audio)
            v_stand = ops.linear(z_v, *self.proj_video)
            enhanced = self.tfe.forward(a_stand, v_stand, z_t, rng, training, trace)
            return self.head.forward(enhanced)
        # full / single-projector / single-head
        x_at = self.cmc_audio.forward(z_t, z_a, rng, training, trace, "attention_audio")
        x_vt = self.cmc_video.forward(z_t, z_v, rng, training, trace, "attention_video")
        enhanced = self.tfe.forward(x_at, x_vt, z_t, rng, training, trace)
        return self.head.forward(enhanced)

    def predict(self, text, audio, video) -> np.ndarray:
        """Eval-mode predictions as a plain array (no graph, no dropout)."""
        with no_grad():
            return self.forward(Tensor(text), Tensor(audio), Tensor(video)).to_numpy()


def build_ablation_model(cfg: ModelConfig, mode: str, rng: RngState) -> TraitFusionModel:
    return TraitFusionModel(cfg, rng, variant=mode)


def ablation_forward(model: TraitFusionModel, text, audio, video,
                     rng: RngState | None = None, training: bool = False,
                     trace: dict | None = None) -> Tensor:
    return model.forward(text, audio, video, rng=rng, training=training, trace=trace)
