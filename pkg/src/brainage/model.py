"""The multiview brain-age model: shared image encoder, per-view stems,
volume encoder, trunk fusion and a regression head."""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import Stem, StemConfig, Trunk, TrunkConfig, stem_flops, trunk_flops
from .errors import ChecksumError, ConfigError, ContractError, FormatVersionError, ShapeError
from .nn import Conv3d, Linear, Module, param
from .numcore import DeterministicRng, Tensor, as_tensor, concatenate, gelu, mean, no_grad, reshape, swapaxes
from .numcore.conv import centered_paddings, conv_output_shape
from .numcore.tensorio import read_tensor, write_tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    chunk_shape: tuple[int, int, int] = (32, 32, 8)
    n_regions: int = 24
    encoder_channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    stride: int = 2
    padding: int | str = "centered"
    d_model: int = 64
    n_heads: int = 4
    stem_queries: int = 16
    trunk_layers: int = 2
    ffn_hidden: int = 128
    volume_hidden: int = 64
    head_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        bad = []
        if len(self.chunk_shape) != 3 or min(self.chunk_shape) < 1:
            bad.append("chunk_shape")
        if self.n_regions < 1:
            bad.append("n_regions")
        if any(c < 1 for c in self.encoder_channels):
            bad.append("encoder_channels")
        for name in ("kernel", "stride", "d_model", "n_heads", "stem_queries", "trunk_layers",
                     "ffn_hidden", "volume_hidden", "head_hidden"):
            if getattr(self, name) < 1:
                bad.append(name)
        if not (self.padding == "centered" or (isinstance(self.padding, int) and self.padding >= 0)):
            bad.append("padding")
        if self.d_model >= 1 and self.n_heads >= 1 and self.d_model % self.n_heads:
            bad.append("n_heads")
        if bad:
            raise ConfigError(f"invalid model config fields: {bad}", bad)
        if "chunk_shape" not in bad:
            try:
                self.token_grid
            except ShapeError as exc:
                raise ConfigError(f"chunk shape {self.chunk_shape} too small for the encoder: {exc}",
                                  ["chunk_shape"]) from None

    @property
    def stem(self) -> StemConfig:
        return StemConfig(self.stem_queries, self.d_model, self.n_heads, self.ffn_hidden)

    @property
    def trunk(self) -> TrunkConfig:
        return TrunkConfig(self.trunk_layers, self.d_model, self.n_heads, self.ffn_hidden)

    @property
    def channel_schedule(self) -> tuple[int, ...]:
        return (1,) + tuple(self.encoder_channels) + (self.d_model,)

    def stage_paddings(self) -> list:
        """Per-stage padding; ``"centered"`` aligns the token grid with the chunk centre."""
        n = len(self.channel_schedule) - 1
        if self.padding == "centered":
            return centered_paddings(self.chunk_shape, self.kernel, self.stride, n)
        return [self.padding] * n

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        shapes = [tuple(self.chunk_shape)]
        for pad in self.stage_paddings():
            shapes.append(conv_output_shape(shapes[-1], self.kernel, self.stride, pad))
        return shapes

    @property
    def token_grid(self) -> tuple[int, int, int]:
        return self.stage_shapes()[-1]

    @property
    def tokens_per_view(self) -> int:
        return int(np.prod(self.token_grid))

    @property
    def trunk_tokens(self) -> int:
        return 3 * self.stem_queries + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chunk_shape"] = list(self.chunk_shape)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["chunk_shape"] = tuple(d["chunk_shape"])
        d["encoder_channels"] = tuple(d["encoder_channels"])
        return cls(**d)


@dataclass
class Standardization:
    """Train-split statistics: per-region volume z-scoring and the age scale of the head."""

    volume_mean: np.ndarray
    volume_std: np.ndarray
    age_mean: float
    age_std: float

    def to_dict(self) -> dict:
        return {"volume_mean": [float(v) for v in self.volume_mean],
                "volume_std": [float(v) for v in self.volume_std],
                "age_mean": float(self.age_mean), "age_std": float(self.age_std)}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(np.array(d["volume_mean"], dtype=np.float64), np.array(d["volume_std"], dtype=np.float64),
                   float(d["age_mean"]), float(d["age_std"]))


@dataclass
class PseudoSample:
    view_s: np.ndarray
    view_c: np.ndarray
    view_a: np.ndarray
    region_volumes: np.ndarray
    age: float
    group: str = "CN"
    cog_score: float = 30.0
    subject_id: str = ""
    scan_id: str = ""

    @property
    def views(self) -> np.ndarray:
        return np.stack([self.view_s, self.view_c, self.view_a])


class ImageEncoder(Module):
    """Strided 3D CNN; every spatial position of the last map becomes a token."""

    def __init__(self, config: ModelConfig, rng: DeterministicRng):
        ch = config.channel_schedule
        self.convs = [
            Conv3d(ch[i], ch[i + 1], config.kernel, rng.substream(("conv", i)), config.stride, pad)
            for i, pad in enumerate(config.stage_paddings())
        ]
        self.proj = Linear(config.d_model, config.d_model, rng.substream("proj"))
        self.chunk_shape = tuple(config.chunk_shape)

    def __call__(self, chunks) -> Tensor:
        """(B, c1, c2, t) -> (B, n, d_model); a single (c1, c2, t) chunk gives (n, d_model)."""
        x = as_tensor(chunks)
        single = x.ndim == 3
        if tuple(x.shape[-3:]) != self.chunk_shape:
            raise ConfigError(f"chunk shape {x.shape[-3:]} does not match config {self.chunk_shape}", ["chunk_shape"])
        if single:
            x = reshape(x, (1,) + x.shape)
        x = reshape(x, (x.shape[0], 1) + x.shape[1:])
        for conv in self.convs:
            x = gelu(conv(x))
        b, d = x.shape[:2]
        tokens = swapaxes(reshape(x, (b, d, -1)), 1, 2)
        tokens = self.proj(tokens)
        return reshape(tokens, tokens.shape[1:]) if single else tokens


class VolumeEncoder(Module):
    """Two affine layers with a GELU between: standardized R-vector -> one d_model token."""

    def __init__(self, config: ModelConfig, rng: DeterministicRng):
        self.fc1 = Linear(config.n_regions, config.volume_hidden, rng.substream("fc1"))
        self.fc2 = Linear(config.volume_hidden, config.d_model, rng.substream("fc2"))
        self.n_regions = config.n_regions

    def __call__(self, standardized) -> Tensor:
        x = as_tensor(standardized)
        if x.shape[-1] != self.n_regions:
            raise ShapeError(f"expected {self.n_regions} region volumes, got {x.shape[-1]}")
        return self.fc2(gelu(self.fc1(x)))


class Head(Module):
    def __init__(self, config: ModelConfig, rng: DeterministicRng):
        self.fc1 = Linear(config.d_model, config.head_hidden, rng.substream("fc1"))
        self.fc2 = Linear(config.head_hidden, 1, rng.substream("fc2"))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class BrainAgeModel(Module):
    def __init__(self, config: ModelConfig, stats: Standardization | None = None):
        self.config = config
        rng = DeterministicRng(config.seed, "model")
        self.encoder = ImageEncoder(config, rng.substream("encoder"))
        self.volume_encoder = VolumeEncoder(config, rng.substream("volume_encoder"))
        self.stems = [Stem(config.stem, rng.substream(("stem", v))) for v in ("sagittal", "coronal", "axial")]
        tags = rng.substream("tags")
        self.view_tags = param(tags.normal(0.0, 0.1, size=(3, config.d_model)))
        self.volume_tag = param(tags.normal(0.0, 0.1, size=(1, config.d_model)))
        self.trunk = Trunk(config.trunk, rng.substream("trunk"))
        self.head = Head(config, rng.substream("head"))
        self.stats = stats

    def standardize_volumes(self, volumes) -> np.ndarray:
        if self.stats is None:
            raise ContractError("model has no standardization stats; set model.stats from the train split")
        v = np.asarray(volumes, dtype=np.float64)
        if v.shape[-1] != self.config.n_regions:
            raise ShapeError(f"expected {self.config.n_regions} region volumes, got {v.shape[-1]}")
        return (v - self.stats.volume_mean) / self.stats.volume_std

    def forward(self, view_s, view_c, view_a, volumes) -> Tensor:
        """Batched forward: views (B, c1, c2, t) each, volumes (B, R) raw mm³ -> ŷ (B,)."""
        views = [as_tensor(v) for v in (view_s, view_c, view_a)]
        b = views[0].shape[0]
        # one encoder, applied to all three views in a single batched pass
        tokens = self.encoder(concatenate(views, axis=0))
        parts = []
        for i, stem in enumerate(self.stems):
            parts.append(stem(tokens[i * b:(i + 1) * b]) + self.view_tags[i:i + 1])
        vol = self.volume_encoder(self.standardize_volumes(volumes))
        parts.append(reshape(vol + self.volume_tag, (b, 1, self.config.d_model)))
        fused = self.trunk(concatenate(parts, axis=1))
        pooled = mean(fused, axis=1)
        out = reshape(self.head(pooled), (b,))
        return out * self.stats.age_std + self.stats.age_mean

    def predict(self, views: np.ndarray, volumes: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Inference on (N, 3, c1, c2, t) views and (N, R) volumes."""
        out = []
        with no_grad():
            for i in range(0, len(views), batch_size):
                v = views[i:i + batch_size]
                out.append(self.forward(v[:, 0], v[:, 1], v[:, 2], volumes[i:i + batch_size]).data)
        return np.concatenate(out) if out else np.zeros(0)


def model_forward(model: BrainAgeModel, sample: PseudoSample) -> float:
    with no_grad():
        y = model.forward(sample.view_s[None], sample.view_c[None], sample.view_a[None],
                          np.asarray(sample.region_volumes)[None])
    return float(y.data[0])


def image_encode(model_or_encoder, chunk) -> Tensor:
    enc = model_or_encoder.encoder if isinstance(model_or_encoder, BrainAgeModel) else model_or_encoder
    return enc(chunk)


def volume_encode(model: BrainAgeModel, region_volumes) -> Tensor:
    """(R,) raw volumes -> (1, d_model) token."""
    z = model.standardize_volumes(np.asarray(region_volumes, dtype=np.float64).reshape(1, -1))
    return model.volume_encoder(z)


# ---------------------------------------------------------------------------
# closed-form parameter and cost counts
# ---------------------------------------------------------------------------

def param_count(config: ModelConfig) -> int:
    """Sum over layers: conv c_out·c_in·k³ + c_out; linear d_in·d_out + d_out;
    layer norm 2d; stem queries m·d; tags 4d."""
    d, f, k = config.d_model, config.ffn_hidden, config.kernel
    lin = lambda a, b: a * b + b  # noqa: E731
    ch = config.channel_schedule
    encoder = sum(ch[i + 1] * ch[i] * k ** 3 + ch[i + 1] for i in range(len(ch) - 1)) + lin(d, d)
    volume = lin(config.n_regions, config.volume_hidden) + lin(config.volume_hidden, d)
    mha = 4 * lin(d, d)
    ffn = lin(d, f) + lin(f, d)
    stem = config.stem_queries * d + 3 * 2 * d + mha + ffn
    block = 2 * 2 * d + mha + ffn
    head = lin(d, config.head_hidden) + lin(config.head_hidden, 1)
    return encoder + volume + 3 * stem + 4 * d + config.trunk_layers * block + head


def model_flops(config: ModelConfig, tokens_per_view: int | None = None) -> int:
    """Multiply-adds of one forward pass (see ``attention.flop_count``)."""
    d, k = config.d_model, config.kernel
    n = config.tokens_per_view if tokens_per_view is None else tokens_per_view
    ch = config.channel_schedule
    shapes = config.stage_shapes()
    enc = sum(ch[i + 1] * ch[i] * k ** 3 * int(np.prod(shapes[i + 1])) for i in range(len(ch) - 1))
    enc += n * d * d
    vol = config.n_regions * config.volume_hidden + config.volume_hidden * d
    stems = stem_flops(n, d, config.stem_queries, config.ffn_hidden)
    trunk = trunk_flops(config.trunk_tokens, d, config.ffn_hidden, config.trunk_layers)
    head = d * config.head_hidden + config.head_hidden
    return 3 * (enc + stems) + vol + trunk + head


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: BrainAgeModel, path, extra: dict | None = None) -> Path:
    """Directory with ``manifest.json`` and one ``params/<name>.tensor`` per parameter."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "params").mkdir(parents=True)
    entries = []
    for name, p in model.named_parameters():
        rel = f"params/{name}.tensor"
        digest = write_tensor(tmp / rel, p.data, "f64")
        entries.append({"name": name, "file": rel, "shape": list(p.shape), "sha256": digest})
    if model.stats is None:
        raise ContractError("cannot checkpoint a model without standardization stats")
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "standardization": model.stats.to_dict(),
        "param_count": param_count(model.config),
        "parameters": entries,
    }
    if extra:
        manifest["extra"] = extra
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load_checkpoint(path) -> BrainAgeModel:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: unreadable checkpoint manifest ({exc})") from None
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise FormatVersionError(
            f"{path}: checkpoint format {manifest.get('format_version')} != supported {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict(manifest["config"])
    state = {}
    for entry in manifest["parameters"]:
        arr = read_tensor(path / entry["file"], sha256=entry["sha256"])
        if list(arr.shape) != entry["shape"]:
            raise ChecksumError(f"{entry['file']}: shape {arr.shape} != recorded {entry['shape']}")
        state[entry["name"]] = arr
    total = sum(a.size for a in state.values())
    if total != manifest["param_count"] or total != param_count(config):
        raise ChecksumError(f"{path}: parameter count {total} != recorded {manifest['param_count']}")
    model = BrainAgeModel(config, Standardization.from_dict(manifest["standardization"]))
    model.load_state_dict(state)
    return model


def checkpoint_digest(path) -> str:
    """Hash over the manifest and all tensor files (for determinism checks)."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()
