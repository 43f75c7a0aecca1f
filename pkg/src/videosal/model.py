"""The full saliency network and its training loop.

Pipeline: a small separable-convolution video encoder taps four feature
levels; temporal compression brings every branch to four time steps;
each branch runs a temporal attention module (the first one behind a
spatial bottleneck); the branches fuse top-down, deepest first; a
readout head upsamples, collapses time, and emits one normalized (H, W)
map per input window.

Two input geometries exist.  The standard one takes 32 frames and
produces branch time extents (16, 16, 8, 4).  The micro one (t_in = 8)
keeps the identical module structure at branch extents (8, 8, 4, 4) with
shorter compression kernels; it exists to make whole-model
finite-difference checks affordable and is selected simply by t_in.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import io, ops
from .attention import AttentionConfig, TemporalAttentionModule
from .autograd import ParameterStore, Tape, Tensor, backward
from .errors import ConfigError, ContractError, DimensionError
from .fusion import FusionStage
from .nn import Conv3d, ConvSpec, adam_step, maxpool3d, upsample_trilinear
from .rng import SplitMix64
from .saliency import LossConfig, loss_total

SUPERVISION_MODES = ("middle", "last")
VARIANTS = ("full", "no_temporal_relations", "single_similarity")


@dataclass(frozen=True)
class ModelConfig:
    t_in: int = 32
    height: int = 48
    width: int = 32
    channels: tuple = (8, 16, 24, 32)
    supervision: str = "middle"
    variant: str = "full"
    use_bottleneck: bool = True
    use_weighting: bool = True
    use_multiscale: bool = True
    fusion: str = "add"
    remove_attention: tuple = ()  # 0-based branch indices with no attention module
    use_layer1: bool = True
    use_layer2: bool = True
    relu_before_norm: bool = False
    attention_scaling: bool = False
    loss_epsilon: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.t_in not in (8, 32):
            raise ConfigError(
                f"t_in must be 32 (standard) or 8 (micro); the fixed temporal "
                f"compression kernels admit no other length, got {self.t_in}")
        if self.height % 16 or self.width % 16:
            raise ConfigError(f"height/width must be multiples of 16, got "
                              f"{self.height}x{self.width}")
        if len(self.channels) != 4:
            raise ConfigError("channels must list four block widths")
        if self.channels[0] % 4 or any(c % 2 for c in self.channels):
            raise ConfigError(f"block channels must be even with the first divisible "
                              f"by 4, got {self.channels}")
        if self.supervision not in SUPERVISION_MODES:
            raise ConfigError(f"supervision must be one of {SUPERVISION_MODES}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.fusion not in ("add", "concat"):
            raise ConfigError("fusion must be 'add' or 'concat'")
        if any(not 0 <= int(b) < 4 for b in self.remove_attention):
            raise ConfigError("remove_attention entries must be branch indices 0..3")

    @property
    def micro(self) -> bool:
        return self.t_in == 8

    def branch_time_extents(self) -> tuple:
        t = self.t_in
        if self.micro:
            return (t, t, t // 2, t // 2)
        return (t // 2, t // 2, t // 4, t // 8)

    def branch_spatial_extents(self) -> tuple:
        h, w = self.height, self.width
        return tuple((h >> k, w >> k) for k in range(1, 5))

    def branch_out_channels(self) -> tuple:
        return tuple(c if i in self.remove_attention else c // 2
                     for i, c in enumerate(self.channels))


@dataclass
class VideoClip:
    """Frames (t_in, 3, H, W) with values in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[1] != 3:
            raise DimensionError(f"clip frames must be (T, 3, H, W), got {f.shape}")
        if f.min() < 0.0 or f.max() > 1.0:
            raise ContractError("clip values must lie in [0, 1]")
        self.frames = f


_RELU_GAIN = float(np.sqrt(2.0))


class _SeparableUnit:
    """Temporal (3x1x1) then spatial (1x3x3) convolution, relu after each."""

    def __init__(self, store, name, cin, cout, rng, t_stride=1, dtype=np.float32):
        self.tconv = Conv3d(store, name + ".t", cin,
                            ConvSpec(cout, (3, 1, 1), (t_stride, 1, 1), (1, 0, 0)),
                            rng, dtype, gain=_RELU_GAIN)
        self.sconv = Conv3d(store, name + ".s", cout,
                            ConvSpec(cout, (1, 3, 3), (1, 1, 1), (0, 1, 1)),
                            rng, dtype, gain=_RELU_GAIN)

    def __call__(self, x):
        return ops.relu(self.sconv(ops.relu(self.tconv(x))))


class Encoder:
    """Four 3D convolution blocks separated by three max pools."""

    def __init__(self, store, cfg: ModelConfig, rng, dtype=np.float32):
        c1, c2, c3, c4 = cfg.channels
        self.stem = Conv3d(store, "enc.stem", 3,
                           ConvSpec(c1, (1, 3, 3), (1, 2, 2), (0, 1, 1)),
                           rng, dtype, gain=_RELU_GAIN)
        self.block1 = _SeparableUnit(store, "enc.b1", c1, c1, rng,
                                     1 if cfg.micro else 2, dtype)
        self.block2 = [_SeparableUnit(store, "enc.b2a", c1, c2, rng, 1, dtype),
                       _SeparableUnit(store, "enc.b2b", c2, c2, rng, 1, dtype)]
        self.block3 = [_SeparableUnit(store, "enc.b3a", c2, c3, rng, 1, dtype),
                       _SeparableUnit(store, "enc.b3b", c3, c3, rng, 1, dtype)]
        self.block4 = [_SeparableUnit(store, "enc.b4a", c3, c4, rng, 1, dtype),
                       _SeparableUnit(store, "enc.b4b", c4, c4, rng, 1, dtype)]
        self.pool3_t = 1 if cfg.micro else 2

    def __call__(self, x):
        f1 = self.block1(ops.relu(self.stem(x)))
        x, _ = maxpool3d(f1, (1, 2, 2), (1, 2, 2))
        f2 = self.block2[1](self.block2[0](x))
        x, _ = maxpool3d(f2, (2, 2, 2), (2, 2, 2))
        f3 = self.block3[1](self.block3[0](x))
        kt = self.pool3_t
        x, _ = maxpool3d(f3, (kt, 2, 2), (kt, 2, 2))
        f4 = self.block4[1](self.block4[0](x))
        return [f1, f2, f3, f4]


class TemporalCompressor:
    """Strided temporal convolutions bringing every branch to 4 steps."""

    def __init__(self, store, cfg: ModelConfig, rng, dtype=np.float32):
        c1, c2, c3, _ = cfg.channels
        self.expected = cfg.branch_time_extents()
        if cfg.micro:
            kernels = ((2, 2), (2, 2), (1, 1))  # (kT, stride) per compressed branch
        else:
            kernels = ((4, 4), (4, 4), (2, 2))
        self.convs = []
        for i, (cin, (kt, st)) in enumerate(zip((c1, c2, c3), kernels)):
            self.convs.append(Conv3d(store, f"compress.b{i + 1}", cin,
                                     ConvSpec(cin, (kt, 1, 1), (st, 1, 1)), rng, dtype))

    def __call__(self, branches):
        got = tuple(f.shape[2] for f in branches)
        if got != self.expected:
            raise ContractError(f"branch time extents {got}, expected {self.expected}")
        out = [conv(f) for conv, f in zip(self.convs, branches[:3])]
        out.append(branches[3])  # already at 4 steps
        return out


class SaliencyModel:
    """Full network; one forward maps a clip to a normalized (H, W) density."""

    def __init__(self, store: ParameterStore, cfg: ModelConfig, dtype=np.float32):
        self.store = store
        self.cfg = cfg
        self.dtype = dtype
        rng = SplitMix64(cfg.seed)
        self.encoder = Encoder(store, cfg, rng, dtype)
        self.compressor = TemporalCompressor(store, cfg, rng, dtype)
        self.attention = []
        for i, c in enumerate(cfg.channels):
            if i in cfg.remove_attention:
                self.attention.append(None)
                continue
            acfg = AttentionConfig(
                channels=c,
                use_bottleneck=cfg.use_bottleneck and i == 0,
                variant=cfg.variant,
                attention_scaling=cfg.attention_scaling,
                use_layer1=cfg.use_layer1,
                use_layer2=cfg.use_layer2)
            self.attention.append(TemporalAttentionModule(store, f"attn{i + 1}", acfg, rng, dtype))
        widths = cfg.branch_out_channels()
        self.stages = []
        deep = widths[3]
        for k in (2, 1, 0):
            self.stages.append(FusionStage(
                store, f"fuse{k + 1}", deep, widths[k], rng,
                use_weighting=cfg.use_weighting,
                use_multiscale=cfg.use_multiscale,
                fusion=cfg.fusion,
                relu_before_norm=cfg.relu_before_norm,
                dtype=dtype))
            deep = widths[k]
        self.head_time = Conv3d(store, "head.time", deep,
                                ConvSpec(deep, (4, 1, 1)), rng, dtype)
        self.head_out = Conv3d(store, "head.out", deep, ConvSpec(1, (1, 1, 1)), rng, dtype)

    def _clip_tensor(self, clip) -> Tensor:
        frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
        t, c, h, w = frames.shape
        if (t, c, h, w) != (self.cfg.t_in, 3, self.cfg.height, self.cfg.width):
            raise DimensionError(
                f"clip shape {frames.shape} does not match config "
                f"({self.cfg.t_in}, 3, {self.cfg.height}, {self.cfg.width})")
        return Tensor(frames.transpose(1, 0, 2, 3)[None].astype(self.dtype))

    def encoder_forward(self, clip):
        return self.encoder(self._clip_tensor(clip))

    def branch_features(self, clip):
        """Compressed, attention-refined features of all four branches."""
        compressed = self.compressor(self.encoder(self._clip_tensor(clip)))
        return [mod(f) if mod is not None else f
                for mod, f in zip(self.attention, compressed)]

    def forward(self, clip) -> Tensor:
        feats = self.branch_features(clip)
        fused = feats[3]
        for stage, k in zip(self.stages, (2, 1, 0)):
            fused = stage(fused, feats[k])
        up = upsample_trilinear(fused, (4, self.cfg.height, self.cfg.width))
        y = ops.sigmoid(self.head_out(self.head_time(up)))
        return ops.normalize_to_sum(ops.reshape(y, (self.cfg.height, self.cfg.width)))

    def predict(self, clip) -> np.ndarray:
        return self.forward(clip).data.copy()


def window_indices(n_frames: int, i: int, t_in: int, mode: str = "middle") -> np.ndarray:
    """Frame indices of the input window whose supervised slot is frame ``i``.

    Middle supervision places frame i at 0-based position t_in/2 - 1;
    last supervision places it at the end.  Out-of-range positions repeat
    the first or last frame.
    """
    if not 0 <= i < n_frames:
        raise ContractError(f"frame index {i} out of range 0..{n_frames - 1}")
    if mode not in SUPERVISION_MODES:
        raise ConfigError(f"supervision must be one of {SUPERVISION_MODES}")
    start = i - (t_in // 2 - 1) if mode == "middle" else i - (t_in - 1)
    return np.clip(np.arange(start, start + t_in), 0, n_frames - 1)


def pad_clip_for_frame(video: np.ndarray, i: int, t_in: int,
                       mode: str = "middle") -> np.ndarray:
    """Extract the (t_in, 3, H, W) window supervising frame ``i``."""
    return video[window_indices(video.shape[0], i, t_in, mode)]


def sliding_window_predict(model: SaliencyModel, video: np.ndarray) -> np.ndarray:
    """One map per frame, each from that frame's padded window."""
    video = np.asarray(video)
    cfg = model.cfg
    out = np.empty((video.shape[0], cfg.height, cfg.width), dtype=np.float32)
    for i in range(video.shape[0]):
        out[i] = model.predict(pad_clip_for_frame(video, i, cfg.t_in, cfg.supervision))
    return out


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 3
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_window: int = 200
    decay_threshold: float = 1e-3  # relative smoothed-loss improvement triggering decay
    decay_factor: float = 10.0
    max_decays: int = 2
    ema_alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")


def train_step(model: SaliencyModel, batch, lr: float, loss_cfg: LossConfig,
               beta1=0.9, beta2=0.999, adam_eps=1e-8) -> float:
    """Mean KL-CC loss over the batch, backward, one Adam step."""
    if not batch:
        raise ContractError("train_step needs a non-empty batch")
    tape = Tape()
    with tape:
        total = None
        for clip, target in batch:
            s = model.forward(clip)
            term = loss_total(s, target, loss_cfg)
            total = term if total is None else ops.add(total, term)
        loss = ops.scale(total, 1.0 / len(batch))
    backward(tape, loss, model.store)
    adam_step(model.store, lr, beta1, beta2, adam_eps)
    return loss.item()


class Trainer:
    """Sequential training over synthetic clips with the lr-decay rule.

    The learning rate divides by ``decay_factor`` whenever the smoothed
    (exponential moving average) loss improves by less than
    ``decay_threshold`` relative over the last ``decay_window`` steps,
    at most ``max_decays`` times.
    """

    def __init__(self, model: SaliencyModel, clips, train_cfg: TrainConfig):
        for frames, density in clips:
            if frames.shape[0] != density.shape[0]:
                raise ContractError("clip frames and densities disagree on length")
        self.model = model
        self.clips = clips
        self.cfg = train_cfg
        self.rng = SplitMix64(train_cfg.seed)
        self.lr = train_cfg.lr
        self.step = 0
        self.decays = 0
        self.last_decay_step = 0
        self.ema = None
        self.ema_history: list[float] = []
        self.loss_cfg = LossConfig(model.cfg.loss_epsilon)

    def _sample_batch(self):
        batch = []
        for _ in range(self.cfg.batch_size):
            ci = self.rng.integer(len(self.clips))
            frames, density = self.clips[ci]
            fi = self.rng.integer(frames.shape[0])
            window = pad_clip_for_frame(frames, fi, self.model.cfg.t_in,
                                        self.model.cfg.supervision)
            batch.append((window, density[fi]))
        return batch

    def _maybe_decay(self):
        c = self.cfg
        if self.decays >= c.max_decays or self.step - self.last_decay_step < c.decay_window:
            return
        if len(self.ema_history) <= c.decay_window:
            return
        prev = self.ema_history[-c.decay_window - 1]
        cur = self.ema_history[-1]
        if prev - cur < c.decay_threshold * abs(prev):
            self.lr /= c.decay_factor
            self.decays += 1
            self.last_decay_step = self.step

    def step_once(self) -> float:
        loss = train_step(self.model, self._sample_batch(), self.lr, self.loss_cfg,
                          self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps)
        self.step += 1
        a = self.cfg.ema_alpha
        self.ema = loss if self.ema is None else (1.0 - a) * self.ema + a * loss
        self.ema_history.append(self.ema)
        if len(self.ema_history) > self.cfg.decay_window + 1:
            del self.ema_history[0]
        self._maybe_decay()
        return loss

    def run(self, steps: int, log=None) -> float:
        loss = float("nan")
        for _ in range(steps):
            loss = self.step_once()
            if log is not None:
                log(f"step {self.step} loss {loss:.6f} smoothed {self.ema:.6f} lr {self.lr:g}")
        return loss


# --- checkpoint serialization ------------------------------------------------

_VARIANT_CODES = {v: i for i, v in enumerate(VARIANTS)}
_SUPERVISION_CODES = {m: i for i, m in enumerate(SUPERVISION_MODES)}


def _split64(v: int) -> np.ndarray:
    return np.asarray([v >> 32, v & 0xFFFFFFFF], dtype=np.float64)


def _join64(arr) -> int:
    return (int(arr[0]) << 32) | int(arr[1])


def config_to_entries(cfg: ModelConfig) -> dict:
    flags = [cfg.use_bottleneck, cfg.use_weighting, cfg.use_multiscale,
             cfg.fusion == "concat", cfg.use_layer1, cfg.use_layer2,
             cfg.relu_before_norm, cfg.attention_scaling]
    removed = [1.0 if i in cfg.remove_attention else 0.0 for i in range(4)]
    f64 = lambda *v: np.asarray(v, dtype=np.float64)
    return {
        "cfg.t_in": f64(cfg.t_in),
        "cfg.height": f64(cfg.height),
        "cfg.width": f64(cfg.width),
        "cfg.channels": f64(*cfg.channels),
        "cfg.supervision": f64(_SUPERVISION_CODES[cfg.supervision]),
        "cfg.variant": f64(_VARIANT_CODES[cfg.variant]),
        "cfg.flags": f64(*flags),
        "cfg.remove_attention": f64(*removed),
        "cfg.loss_epsilon": f64(cfg.loss_epsilon),
        "cfg.seed": _split64(cfg.seed),
    }


def config_from_entries(entries: dict) -> ModelConfig:
    flags = entries["cfg.flags"]
    removed = tuple(i for i, v in enumerate(entries["cfg.remove_attention"]) if v)
    return ModelConfig(
        t_in=int(entries["cfg.t_in"][0]),
        height=int(entries["cfg.height"][0]),
        width=int(entries["cfg.width"][0]),
        channels=tuple(int(c) for c in entries["cfg.channels"]),
        supervision=SUPERVISION_MODES[int(entries["cfg.supervision"][0])],
        variant=VARIANTS[int(entries["cfg.variant"][0])],
        use_bottleneck=bool(flags[0]),
        use_weighting=bool(flags[1]),
        use_multiscale=bool(flags[2]),
        fusion="concat" if flags[3] else "add",
        remove_attention=removed,
        use_layer1=bool(flags[4]),
        use_layer2=bool(flags[5]),
        relu_before_norm=bool(flags[6]),
        attention_scaling=bool(flags[7]),
        loss_epsilon=float(entries["cfg.loss_epsilon"][0]),
        seed=_join64(entries["cfg.seed"]),
    )


def save_checkpoint(path, model: SaliencyModel, trainer: Trainer | None = None) -> None:
    entries = config_to_entries(model.cfg)
    opt_step = 0
    for name, e in model.store.items():
        entries[f"param/{name}"] = e.value.data
        opt_step = e.step
    for name, e in model.store.items():
        entries[f"opt.m/{name}"] = e.adam_m
        entries[f"opt.v/{name}"] = e.adam_v
    entries["opt.step"] = np.asarray([opt_step], dtype=np.float64)
    if trainer is not None:
        entries["train.step"] = np.asarray([trainer.step], dtype=np.float64)
        entries["train.lr"] = np.asarray([trainer.lr], dtype=np.float64)
        entries["train.decays"] = np.asarray([trainer.decays], dtype=np.float64)
        entries["train.last_decay"] = np.asarray([trainer.last_decay_step], dtype=np.float64)
        hist = trainer.ema_history if trainer.ema_history else [np.nan]
        entries["train.ema_history"] = np.asarray(hist, dtype=np.float64)
        entries["train.rng"] = _split64(int(trainer.rng.state))
    io.write_checkpoint(path, entries)


def load_checkpoint(path, dtype=np.float32):
    """Rebuild (model, trainer state dict) from a checkpoint file."""
    entries = io.read_checkpoint(path)
    cfg = config_from_entries(entries)
    store = ParameterStore()
    model = SaliencyModel(store, cfg, dtype)
    opt_step = int(entries["opt.step"][0])
    for name, e in store.items():
        e.value.data[...] = entries[f"param/{name}"].astype(dtype)
        e.adam_m[...] = entries[f"opt.m/{name}"].astype(dtype)
        e.adam_v[...] = entries[f"opt.v/{name}"].astype(dtype)
        e.step = opt_step
    state = {k: v for k, v in entries.items() if k.startswith("train.")}
    return model, state


def restore_trainer(model: SaliencyModel, clips, train_cfg: TrainConfig, state: dict) -> Trainer:
    trainer = Trainer(model, clips, train_cfg)
    if state:
        trainer.step = int(state["train.step"][0])
        trainer.lr = float(state["train.lr"][0])
        trainer.decays = int(state["train.decays"][0])
        trainer.last_decay_step = int(state["train.last_decay"][0])
        hist = [float(v) for v in state["train.ema_history"]]
        trainer.ema_history = [] if (len(hist) == 1 and np.isnan(hist[0])) else hist
        trainer.ema = trainer.ema_history[-1] if trainer.ema_history else None
        trainer.rng = SplitMix64.from_state_words(*(int(v) for v in state["train.rng"]))
    return trainer


# --- config files -------------------------------------------------------------

_MODEL_KEYS = {
    "t_in": int, "height": int, "width": int,
    "supervision": str, "variant": str, "fusion": str,
    "loss_epsilon": float, "seed": int,
}
_MODEL_BOOL_KEYS = ("bottleneck", "attentional_weighting", "multiscale",
                    "use_layer1", "use_layer2", "relu_before_norm", "attention_scaling")
_TRAIN_KEYS = {"steps": int, "batch_size": int, "lr": float}
_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}

_KEY_TO_FIELD = {"bottleneck": "use_bottleneck", "attentional_weighting": "use_weighting",
                 "multiscale": "use_multiscale"}


def configs_from_text(raw: dict) -> tuple[ModelConfig, TrainConfig]:
    """Apply parsed ``key = value`` pairs on top of the defaults."""
    model_kwargs = {}
    train_kwargs = {}
    for key, (value, lineno) in raw.items():
        try:
            if key in _MODEL_KEYS:
                model_kwargs[key] = _MODEL_KEYS[key](value)
            elif key in _MODEL_BOOL_KEYS:
                if value.lower() not in _BOOL_WORDS:
                    raise ValueError(f"expected a boolean, got {value!r}")
                model_kwargs[_KEY_TO_FIELD.get(key, key)] = _BOOL_WORDS[value.lower()]
            elif key == "channels":
                model_kwargs[key] = tuple(int(v) for v in value.split(","))
            elif key == "remove_attention":
                model_kwargs[key] = tuple(int(v) for v in value.split(",")) if value != "none" else ()
            elif key in _TRAIN_KEYS:
                train_kwargs[key] = _TRAIN_KEYS[key](value)
            else:
                raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r} (line {lineno}): {exc}") from None
    if "seed" in model_kwargs:
        train_kwargs["seed"] = model_kwargs["seed"]
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def configs_from_file(path=None) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return ModelConfig(), TrainConfig()
    return configs_from_text(io.read_config_file(path))
