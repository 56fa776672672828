"""The separation model: encoder, mixer, U-shaped recurrent masking blocks,
latent-space masking and decoder, in offline (training) and streaming forms.

Offline passes run on autograd tensors and are differentiable end to end.
The streaming path operates frame by frame on raw arrays with O(1) state per
stream (conv left-context buffers, recurrent states, cumulative-norm running
sums, overlap-add tail) and reproduces the offline output up to 32-bit
accumulation-order noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import layers as nn
from . import tensor as T
from .framing import FrameSpec, OverlapAddState, flush_overlap_add, overlap_add, \
    streaming_overlap_add
from .layers import ConvSpec, NormState, RnnSpec
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1          # M
    num_sources: int = 2          # C
    latent_dim: int = 256         # N
    frame_len: int = 16           # L (samples)
    hop: int = 8
    depth: int = 5                # D
    rnn_kind: str = "LSTM"        # LSTM -> "UL", GRU -> "UG"
    n_blocks: int = 1
    norm_kind: str = "cLN"        # "cLN" | "LN" (framewise ablation)
    channel_interaction: bool = False   # regular conv instead of depthwise in filter units
    sample_rate: int = 8000

    def __post_init__(self):
        if self.latent_dim % (1 << self.depth) != 0:
            raise ValueError(f"latent_dim {self.latent_dim} not divisible by 2^depth")
        if self.num_sources < 1 or self.in_channels < 1 or self.n_blocks < 1:
            raise ValueError("channel/source/block counts must be >= 1")
        if self.rnn_kind not in ("LSTM", "GRU"):
            raise ValueError(f"unknown rnn kind {self.rnn_kind!r}")
        if self.norm_kind not in ("cLN", "LN"):
            raise ValueError(f"unknown norm kind {self.norm_kind!r}")

    @property
    def frame_spec(self) -> FrameSpec:
        return FrameSpec(self.frame_len, self.hop, self.sample_rate)

    def resolution(self, level: int) -> int:
        """Feature extent at filter/aggregate level (1-based); bottom is depth+1."""
        return self.latent_dim >> (level - 1)


UNIT_KERNEL = (3, 3)


def _uniform(shape, fan_in, rng, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor.uniform(shape, -bound, bound, rng, requires_grad=True, dtype=dtype)


class UXNetParams:
    """All trainable weights, addressable by hierarchical name."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors.keys())

    def total_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def astype(self, dtype) -> "UXNetParams":
        return UXNetParams(self.config, {
            k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for k, t in self.tensors.items()
        })

    @staticmethod
    def init(config: ModelConfig, rng: np.random.Generator,
             dtype=np.float32) -> "UXNetParams":
        M, C, N, L, D = (config.in_channels, config.num_sources, config.latent_dim,
                         config.frame_len, config.depth)
        k_t, k_f = UNIT_KERNEL
        taps = nn.RESAMPLE_TAPS
        p: dict[str, Tensor] = {}

        def zeros(name, shape):
            p[name] = Tensor.zeros(shape, requires_grad=True, dtype=dtype)

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

        def slope(name, channels):
            p[name] = Tensor(np.full(channels, 0.25, dtype=dtype), requires_grad=True)

        def norm(prefix, features):
            ones(f"{prefix}.gamma", features)
            zeros(f"{prefix}.beta", features)

        def conv(prefix, c_out, c_in):
            p[f"{prefix}.weight"] = _uniform((c_out, c_in, k_t, k_f),
                                             c_in * k_t * k_f, rng, dtype)
            zeros(f"{prefix}.bias", c_out)

        def depthwise(prefix, channels):
            p[f"{prefix}.weight"] = _uniform((channels, k_t, k_f), k_t * k_f, rng, dtype)
            zeros(f"{prefix}.bias", channels)

        def resample(prefix, channels):
            p[f"{prefix}.weight"] = _uniform((channels, taps), taps, rng, dtype)
            zeros(f"{prefix}.bias", channels)

        def rnn(prefix, size):
            gates = 4 if config.rnn_kind == "LSTM" else 3
            p[f"{prefix}.wx"] = _uniform((size, gates * size), size, rng, dtype)
            p[f"{prefix}.wh"] = _uniform((size, gates * size), size, rng, dtype)
            zeros(f"{prefix}.bias", gates * size)

        def process_unit(prefix, c_in, resolution):
            conv(f"{prefix}.conv", C, c_in)
            norm(f"{prefix}.norm", resolution)
            slope(f"{prefix}.prelu.slope", C)
            rnn(f"{prefix}.rnn", resolution)
            p[f"{prefix}.ff.weight"] = _uniform((resolution, resolution),
                                                resolution, rng, dtype)
            zeros(f"{prefix}.ff.bias", resolution)

        norm("encoder.norm", L)
        p["encoder.weight"] = _uniform((L, N), L, rng, dtype)

        conv("mixer.conv1", M, M)
        norm("mixer.norm1", N)
        slope("mixer.prelu1.slope", M)
        conv("mixer.conv2", C, M)
        norm("mixer.norm2", N)
        slope("mixer.prelu2.slope", C)

        for blk in range(config.n_blocks):
            for d in range(1, D + 1):
                if config.channel_interaction:
                    conv(f"block{blk}.l{d}.conv", C, C)
                else:
                    depthwise(f"block{blk}.l{d}.conv", C)
                resample(f"block{blk}.l{d}.down", C)
            process_unit(f"block{blk}.bottom", C, config.resolution(D + 1))
            resample(f"block{blk}.bottom.up", C)
            for d in range(D, 0, -1):
                process_unit(f"block{blk}.r{d}", 2 * C, config.resolution(d))
                if d > 1:
                    resample(f"block{blk}.r{d}.up", C)

        p["decoder.weight"] = _uniform((N, L), N, rng, dtype)
        return UXNetParams(config, p)


# -- offline (differentiable) forward -------------------------------------

def _norm(cfg: ModelConfig, x, gamma, beta, state=None):
    if cfg.norm_kind == "cLN":
        return nn.cln(x, gamma, beta, state=state)
    return nn.framewise_ln(x, gamma, beta)


def encode(params: UXNetParams, x: Tensor) -> Tensor:
    """Raw frames [M, K, L] -> nonnegative latent weights [M, K, N]."""
    cfg = params.config
    if x.shape[0] != cfg.in_channels or x.shape[2] != cfg.frame_len:
        raise ValueError(f"input shape {x.shape} does not match config")
    y = _norm(cfg, x, params["encoder.norm.gamma"], params["encoder.norm.beta"])
    y = nn.feed_forward(y, params["encoder.weight"])
    return T.relu(y)


def mix(params: UXNetParams, e: Tensor) -> Tensor:
    """Combine M encoded channels into C output streams: [M,K,N] -> [C,K,N]."""
    cfg = params.config
    M, C = cfg.in_channels, cfg.num_sources
    if e.shape[0] != M:
        raise ValueError(f"expected {M} channels, got {e.shape[0]}")
    y = nn.conv2d_causal(e, ConvSpec(M, M, UNIT_KERNEL),
                         params["mixer.conv1.weight"], params["mixer.conv1.bias"])
    y = _norm(cfg, y, params["mixer.norm1.gamma"], params["mixer.norm1.beta"])
    y = nn.prelu(y, params["mixer.prelu1.slope"])
    y = nn.conv2d_causal(y, ConvSpec(M, C, UNIT_KERNEL),
                         params["mixer.conv2.weight"], params["mixer.conv2.bias"])
    y = _norm(cfg, y, params["mixer.norm2.gamma"], params["mixer.norm2.beta"])
    y = nn.prelu(y, params["mixer.prelu2.slope"])
    return y


def _rnn_seq(cfg: ModelConfig, x, wx, wh, b):
    if cfg.rnn_kind == "LSTM":
        return nn.lstm_seq(x, wx, wh, b)
    return nn.gru_seq(x, wx, wh, b)


def _process_unit(params: UXNetParams, prefix: str, x: Tensor, c_in: int) -> Tensor:
    """conv -> norm -> PReLU -> shared-weight RNN over time -> feed-forward."""
    cfg = params.config
    C = cfg.num_sources
    y = nn.conv2d_causal(x, ConvSpec(c_in, C, UNIT_KERNEL),
                         params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"])
    y = _norm(cfg, y, params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"])
    y = nn.prelu(y, params[f"{prefix}.prelu.slope"])
    y = _rnn_seq(cfg, y, params[f"{prefix}.rnn.wx"], params[f"{prefix}.rnn.wh"],
                 params[f"{prefix}.rnn.bias"])
    y = nn.feed_forward(y, params[f"{prefix}.ff.weight"], params[f"{prefix}.ff.bias"])
    return y


def ux_block(params: UXNetParams, x: Tensor, blk: int = 0) -> Tensor:
    """One U-shaped pass over [C, K, N]: filter down the resolutions, process
    at the bottom, aggregate back up with skip concatenations."""
    cfg = params.config
    C, D = cfg.num_sources, cfg.depth
    if x.shape[2] != cfg.latent_dim:
        raise ValueError(f"expected feature extent {cfg.latent_dim}, got {x.shape[2]}")
    skips = []
    h = x
    for d in range(1, D + 1):
        pre = f"block{blk}.l{d}"
        if cfg.channel_interaction:
            l_out = nn.conv2d_causal(h, ConvSpec(C, C, UNIT_KERNEL),
                                     params[f"{pre}.conv.weight"], params[f"{pre}.conv.bias"])
        else:
            l_out = nn.depthwise_conv_causal(h, params[f"{pre}.conv.weight"],
                                             params[f"{pre}.conv.bias"])
        skips.append(l_out)
        h = nn.feature_downsample(l_out, params[f"{pre}.down.weight"],
                                  params[f"{pre}.down.bias"])
    h = _process_unit(params, f"block{blk}.bottom", h, C)
    h = nn.feature_upsample(h, params[f"block{blk}.bottom.up.weight"],
                            params[f"block{blk}.bottom.up.bias"])
    for d in range(D, 0, -1):
        h = T.concat([h, skips[d - 1]], axis=0)
        h = _process_unit(params, f"block{blk}.r{d}", h, 2 * C)
        if d > 1:
            h = nn.feature_upsample(h, params[f"block{blk}.r{d}.up.weight"],
                                    params[f"block{blk}.r{d}.up.bias"])
    return h


def estimate_masks(params: UXNetParams, e_c: Tensor) -> Tensor:
    """Stacked U-blocks with additive skip connections, then Sigmoid."""
    h = e_c
    for blk in range(params.config.n_blocks):
        h = ux_block(params, h, blk) + h
    return T.sigmoid(h)


def separate(masks: Tensor, e: Tensor) -> Tensor:
    """Apply each source's mask to the reference-channel encoding."""
    if masks.shape[1:] != e.shape[1:]:
        raise ValueError(f"mask/encoding shape mismatch {masks.shape} vs {e.shape}")
    e1 = T.broadcast_to(e[0:1], masks.shape)
    return masks * e1


def decode(params: UXNetParams, e_s: Tensor) -> Tensor:
    """Latent sources [C, K, N] -> time-domain frames [C, K, L]."""
    return nn.feed_forward(e_s, params["decoder.weight"])


def forward_frames(params: UXNetParams, x: Tensor) -> Tensor:
    """[M, K, L] input frames -> [C, K, L] separated frames."""
    e = encode(params, x)
    e_c = mix(params, e)
    masks = estimate_masks(params, e_c)
    e_s = separate(masks, e)
    return decode(params, e_s)


def forward_offline(params: UXNetParams, x: Tensor) -> Tensor:
    """[M, K, L] input frames -> [C, T'] separated waveforms."""
    s_hat = forward_frames(params, x)
    return overlap_add(s_hat, params.config.frame_spec)


# -- streaming ------------------------------------------------------------

@dataclass
class StreamState:
    """Per-stream causal memory; size is O(model depth), not stream length."""
    config: ModelConfig
    norms: dict = field(default_factory=dict)          # prefix -> NormState
    conv_ctx: dict = field(default_factory=dict)       # prefix -> [Cin, k_t-1, F]
    rnn_h: dict = field(default_factory=dict)          # prefix -> [C, H]
    rnn_c: dict = field(default_factory=dict)
    ola: OverlapAddState = None
    frames_seen: int = 0


def init_stream_state(config: ModelConfig | UXNetParams) -> StreamState:
    cfg = config.config if isinstance(config, UXNetParams) else config
    M, C, N, D = cfg.in_channels, cfg.num_sources, cfg.latent_dim, cfg.depth
    k_t = UNIT_KERNEL[0]
    st = StreamState(cfg)
    st.ola = OverlapAddState(cfg.frame_spec, channels=C)

    def norm(prefix):
        st.norms[prefix] = NormState()

    def ctx(prefix, c_in, feat):
        st.conv_ctx[prefix] = np.zeros((c_in, k_t - 1, feat), dtype=np.float32)

    def rnn(prefix, size):
        st.rnn_h[prefix] = np.zeros((C, size), dtype=np.float32)
        if cfg.rnn_kind == "LSTM":
            st.rnn_c[prefix] = np.zeros((C, size), dtype=np.float32)

    norm("encoder.norm")
    ctx("mixer.conv1", M, N)
    norm("mixer.norm1")
    ctx("mixer.conv2", M, N)
    norm("mixer.norm2")
    for blk in range(cfg.n_blocks):
        for d in range(1, D + 1):
            ctx(f"block{blk}.l{d}.conv", C, cfg.resolution(d))
        ctx(f"block{blk}.bottom.conv", C, cfg.resolution(D + 1))
        norm(f"block{blk}.bottom.norm")
        rnn(f"block{blk}.bottom.rnn", cfg.resolution(D + 1))
        for d in range(D, 0, -1):
            ctx(f"block{blk}.r{d}.conv", 2 * C, cfg.resolution(d))
            norm(f"block{blk}.r{d}.norm")
            rnn(f"block{blk}.r{d}.rnn", cfg.resolution(d))
    return st


def reset_stream_state(state: StreamState):
    fresh = init_stream_state(state.config)
    state.norms = fresh.norms
    state.conv_ctx = fresh.conv_ctx
    state.rnn_h = fresh.rnn_h
    state.rnn_c = fresh.rnn_c
    state.ola = fresh.ola
    state.frames_seen = 0


def _norm_step(cfg: ModelConfig, frame: np.ndarray, gamma, beta,
               state: NormState | None) -> np.ndarray:
    """frame: [C, F]; cumulative or framewise per config."""
    dt = frame.dtype.type
    row = frame.reshape(-1)
    s = row.sum()
    sq = (row * row).sum()
    n_elem = row.size
    if cfg.norm_kind == "cLN":
        cs = dt(dt(state.running_sum) + s)
        csq = dt(dt(state.running_sq_sum) + sq)
        n = dt(state.count + n_elem)
        state.running_sum = float(cs)
        state.running_sq_sum = float(csq)
        state.count += n_elem
    else:
        cs, csq, n = s, sq, dt(n_elem)
    mu = cs / n
    var = csq / n - mu * mu
    if var < 0.0:
        var = dt(0.0)
    denom = np.sqrt(var + dt(nn.CLN_EPS))
    return (frame - mu) / denom * gamma + beta


def _conv_step(window: np.ndarray, w: np.ndarray, b: np.ndarray | None,
               s_f: int = 1) -> np.ndarray:
    """window: [Cin, k_t, F]; w: [Cout, Cin, k_t, k_f] -> [Cout, F']."""
    k_f = w.shape[3]
    pl, pr = nn._feature_padding(k_f, s_f)
    xp = np.pad(window, ((0, 0), (0, 0), (pl, pr)))
    sw = sliding_window_view(xp, k_f, axis=2)[:, :, ::s_f, :]   # [Cin,k_t,F',k_f]
    cols = sw.transpose(2, 0, 1, 3).reshape(sw.shape[2], -1)
    out = (cols @ w.reshape(w.shape[0], -1).T).T
    if b is not None:
        out = out + b[:, None]
    return out


def _depthwise_step(window: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                    s_f: int = 1) -> np.ndarray:
    """window: [C, k_t, F]; w: [C, k_t, k_f] -> [C, F']."""
    k_f = w.shape[2]
    pl, pr = nn._feature_padding(k_f, s_f)
    xp = np.pad(window, ((0, 0), (0, 0), (pl, pr)))
    sw = sliding_window_view(xp, k_f, axis=2)[:, :, ::s_f, :]   # [C,k_t,F',k_f]
    C = w.shape[0]
    cols = sw.transpose(0, 2, 1, 3).reshape(C, sw.shape[2], -1)
    out = (cols @ w.reshape(C, -1, 1))[:, :, 0]
    if b is not None:
        out = out + b[:, None]
    return out


def _upsample_step(frame: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    C, F = frame.shape
    taps = nn.RESAMPLE_TAPS
    idx = 2 * np.arange(F)[:, None] + np.arange(taps)[None, :]
    contrib = frame[:, :, None] * w[:, None, :]
    out_pad = np.zeros((C, 2 * F + 2), dtype=frame.dtype)
    np.add.at(out_pad, (slice(None), idx.reshape(-1)), contrib.reshape(C, -1))
    return out_pad[:, 1:1 + 2 * F] + b[:, None]


def _conv_ctx_step(state: StreamState, prefix: str, frame: np.ndarray,
                   w, b, depthwise: bool) -> np.ndarray:
    ctx = state.conv_ctx[prefix]
    window = np.concatenate([ctx, frame[:, None, :]], axis=1)
    state.conv_ctx[prefix] = window[:, 1:, :]
    if depthwise:
        return _depthwise_step(window, w, b)
    return _conv_step(window, w, b)


def _unit_step(params: UXNetParams, state: StreamState, prefix: str,
               frame: np.ndarray) -> np.ndarray:
    cfg = params.config
    p = params.tensors
    y = _conv_ctx_step(state, f"{prefix}.conv", frame,
                       p[f"{prefix}.conv.weight"].data, p[f"{prefix}.conv.bias"].data,
                       depthwise=False)
    y = _norm_step(cfg, y, p[f"{prefix}.norm.gamma"].data, p[f"{prefix}.norm.beta"].data,
                   state.norms.get(f"{prefix}.norm"))
    slope = p[f"{prefix}.prelu.slope"].data[:, None]
    y = np.where(y >= 0, y, slope * y)
    if cfg.rnn_kind == "LSTM":
        h, c = nn.lstm_step(y, state.rnn_h[f"{prefix}.rnn"], state.rnn_c[f"{prefix}.rnn"],
                            p[f"{prefix}.rnn.wx"].data, p[f"{prefix}.rnn.wh"].data,
                            p[f"{prefix}.rnn.bias"].data)
        state.rnn_h[f"{prefix}.rnn"] = h
        state.rnn_c[f"{prefix}.rnn"] = c
        y = h
    else:
        h = nn.gru_step(y, state.rnn_h[f"{prefix}.rnn"],
                        p[f"{prefix}.rnn.wx"].data, p[f"{prefix}.rnn.wh"].data,
                        p[f"{prefix}.rnn.bias"].data)
        state.rnn_h[f"{prefix}.rnn"] = h
        y = h
    return y @ p[f"{prefix}.ff.weight"].data + p[f"{prefix}.ff.bias"].data


def forward_streaming(params: UXNetParams, frame: np.ndarray,
                      state: StreamState) -> np.ndarray:
    """Process one raw frame [M, L]; emit [C, hop] separated samples."""
    cfg = params.config
    if state.config != cfg:
        raise ValueError("stream state was created for a different config")
    p = params.tensors
    M, C, D = cfg.in_channels, cfg.num_sources, cfg.depth
    frame = np.asarray(frame, dtype=np.float32).reshape(M, cfg.frame_len)

    # encoder
    y = _norm_step(cfg, frame, p["encoder.norm.gamma"].data, p["encoder.norm.beta"].data,
                   state.norms.get("encoder.norm"))
    e = np.maximum(y @ p["encoder.weight"].data, 0.0)            # [M, N]

    # mixer
    y = _conv_ctx_step(state, "mixer.conv1", e, p["mixer.conv1.weight"].data,
                       p["mixer.conv1.bias"].data, depthwise=False)
    y = _norm_step(cfg, y, p["mixer.norm1.gamma"].data, p["mixer.norm1.beta"].data,
                   state.norms.get("mixer.norm1"))
    y = np.where(y >= 0, y, p["mixer.prelu1.slope"].data[:, None] * y)
    y = _conv_ctx_step(state, "mixer.conv2", y, p["mixer.conv2.weight"].data,
                       p["mixer.conv2.bias"].data, depthwise=False)
    y = _norm_step(cfg, y, p["mixer.norm2.gamma"].data, p["mixer.norm2.beta"].data,
                   state.norms.get("mixer.norm2"))
    e_c = np.where(y >= 0, y, p["mixer.prelu2.slope"].data[:, None] * y)  # [C, N]

    # separation blocks
    h = e_c
    for blk in range(cfg.n_blocks):
        block_in = h
        skips = []
        for d in range(1, D + 1):
            pre = f"block{blk}.l{d}"
            l_out = _conv_ctx_step(state, f"{pre}.conv", h,
                                   p[f"{pre}.conv.weight"].data, p[f"{pre}.conv.bias"].data,
                                   depthwise=not cfg.channel_interaction)
            skips.append(l_out)
            h = _depthwise_step(l_out[:, None, :],
                                p[f"{pre}.down.weight"].data.reshape(C, 1, nn.RESAMPLE_TAPS),
                                p[f"{pre}.down.bias"].data, s_f=2)
        h = _unit_step(params, state, f"block{blk}.bottom", h)
        h = _upsample_step(h, p[f"block{blk}.bottom.up.weight"].data,
                           p[f"block{blk}.bottom.up.bias"].data)
        for d in range(D, 0, -1):
            h = np.concatenate([h, skips[d - 1]], axis=0)
            h = _unit_step(params, state, f"block{blk}.r{d}", h)
            if d > 1:
                h = _upsample_step(h, p[f"block{blk}.r{d}.up.weight"].data,
                                   p[f"block{blk}.r{d}.up.bias"].data)
        h = h + block_in
    masks = 1.0 / (1.0 + np.exp(-h))                             # [C, N]

    e_s = masks * e[0:1]                                          # reference channel
    s_frames = e_s @ p["decoder.weight"].data                     # [C, L]
    state.frames_seen += 1
    return streaming_overlap_add(s_frames, state.ola)


def flush_streaming(state: StreamState) -> np.ndarray:
    """Emit the overlap-add tail after the last frame."""
    return flush_overlap_add(state.ola)
