"""Training configuration and its flat ``key = value`` file format."""
from dataclasses import dataclass, fields

from .tensor import ConfigurationError

MODES = ("advnlg", "rl", "no-adv", "no-warmup")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 20
    beam_width: int = 10
    clip_c: float = 0.1
    tau: float = 0.1
    warmup_epochs: int = 2
    gen_updates_per_disc: int = 5
    adv_weight: float = 1.0
    total_epochs: int = 20
    seed: int = 0
    mode: str = "advnlg"
    d_emb: int = 50
    d_h: int = 128
    dropout: float = 0.25
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    forward_select: str = "greedy"
    rollout_len_factor: float = 1.5
    rl_baseline_decay: float = 0.95
    length_norm: bool = True
    dev_beam: int = 1
    min_count: int = 1
    debug: bool = False

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.forward_select not in ("greedy", "gumbel"):
            raise ConfigurationError(f"forward_select must be greedy or gumbel, got {self.forward_select!r}")
        for name in ("lr", "batch_size", "beam_width", "clip_c", "tau", "gen_updates_per_disc",
                     "d_emb", "d_h", "rms_eps", "bn_eps", "rollout_len_factor", "dev_beam",
                     "min_count"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("warmup_epochs", "total_epochs", "adv_weight"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not (0 < self.rms_decay < 1 and 0 <= self.rl_baseline_decay < 1):
            raise ConfigurationError("decay rates must lie in (0, 1)")
        return self

    def to_text(self):
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text, **overrides):
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(raw, types[key], key)
        values.update(overrides)
        return cls(**values).validate()

    @classmethod
    def load(cls, path, **overrides):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw, typ, key):
    typ = typ if isinstance(typ, type) else {"float": float, "int": int, "str": str, "bool": bool}[typ]
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        return typ(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc
