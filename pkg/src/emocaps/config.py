"""Configuration dataclasses and the two dataset presets."""
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError

IEMOCAP_LABELS = ("happy", "sad", "neutral", "angry", "excited", "frustrated")
MELD_LABELS = ("neutral", "surprise", "fear", "sadness", "joy", "disgust", "angry")

MODALITIES = ("text", "audio", "visual")


@dataclass(frozen=True)
class EmoformerConfig:
    d_model: int
    n_heads: int = 4
    d_ff: int = 0  # 0 -> 2 * d_model
    d_emotion: int = 8
    dropout_rate: float = 0.1
    attention_scale: str = "d_head"  # or "d_model"

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 2 * self.d_model)
        if min(self.d_model, self.n_heads, self.d_ff, self.d_emotion) < 1:
            raise ConfigError(f"all Emoformer dims must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.attention_scale not in ("d_head", "d_model"):
            raise ConfigError(f"attention_scale must be 'd_head' or 'd_model', "
                              f"got {self.attention_scale!r}")

    @property
    def d_head(self):
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the whole EmoCaps model.

    ``text_dim``/``audio_dim``/``visual_dim`` are input feature extents;
    the ``*_emotion_dim`` fields are emotion-vector extents.
    """
    text_dim: int = 16
    audio_dim: int = 16
    visual_dim: int = 16
    text_emotion_dim: int = 8
    audio_emotion_dim: int = 8
    visual_emotion_dim: int = 8
    n_heads: int = 4
    d_ff: int = 0
    hidden_dim: int = 128
    mlp_dim: int = 128
    n_classes: int = 6
    dropout: float = 0.1
    attention_scale: str = "d_head"
    dtype: str = "float64"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type is int and f.name != "d_ff" and v < 1:
                raise ConfigError(f"model.{f.name} must be positive, got {v}")
        if self.n_classes < 2:
            raise ConfigError(f"model.n_classes must be at least 2, got {self.n_classes}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"model.dtype must be float64 or float32, got {self.dtype!r}")
        # validates head split and dropout
        self.emoformer("audio")
        self.emoformer("visual")

    def emoformer(self, modality):
        d_model = {"audio": self.audio_dim, "visual": self.visual_dim}[modality]
        d_emotion = {"audio": self.audio_emotion_dim,
                     "visual": self.visual_emotion_dim}[modality]
        return EmoformerConfig(d_model=d_model, n_heads=self.n_heads, d_ff=self.d_ff,
                               d_emotion=d_emotion, dropout_rate=self.dropout,
                               attention_scale=self.attention_scale)

    @property
    def capsule_extents(self):
        """(U_t, E_t, E_v, E_a) extents in capsule order."""
        return (self.text_dim, self.text_emotion_dim, self.visual_emotion_dim,
                self.audio_emotion_dim)

    @property
    def capsule_dim(self):
        return sum(self.capsule_extents)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    lr: float = 1e-4
    dropout: float = 0.1
    batch_size: int = 30
    clip_norm: float | None = 5.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or null")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Preset:
    """Hyperparameters as printed for one dataset.

    ``dim_t`` is the textual emotion-vector extent, ``dim_v``/``dim_a`` the
    visual/audio ones. Sentence-vector extent comes from the data.
    """
    name: str
    labels: tuple
    epochs: int
    lr: float
    dropout: float
    batch_size: int
    dim_t: int
    dim_v: int
    dim_a: int

    def train_config(self, **overrides):
        base = TrainConfig(epochs=self.epochs, lr=self.lr, dropout=self.dropout,
                           batch_size=self.batch_size)
        return replace(base, **overrides)

    def model_overrides(self):
        return {"text_emotion_dim": self.dim_t, "visual_emotion_dim": self.dim_v,
                "audio_emotion_dim": self.dim_a, "dropout": self.dropout,
                "n_classes": len(self.labels)}


PRESETS = {
    "iemocap": Preset("iemocap", IEMOCAP_LABELS, epochs=80, lr=0.0001, dropout=0.1,
                      batch_size=30, dim_t=100, dim_v=256, dim_a=100),
    "meld": Preset("meld", MELD_LABELS, epochs=80, lr=0.0001, dropout=0.1,
                   batch_size=30, dim_t=600, dim_v=256, dim_a=300),
}


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)} or 'custom'")


@dataclass
class RunConfig:
    """Everything a CLI run needs. Precedence: flags > config file > preset."""
    manifest: str | None = None
    preset: str = "custom"
    out: str = "runs/out"
    seed: int = 0
    threads: int = 1
    split: tuple = (0.8, 0.1, 0.1)
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    modalities: tuple = MODALITIES
