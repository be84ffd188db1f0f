"""Run configuration: plain key=value text, every field defaulted."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from dfsmc.errors import DfsmcError


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    ratio: float = 0.6
    copies: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 8
    feature_dim: int = 64
    C: float = 1.0
    input_size: int = 64
    finetune_lr_factor: float = 0.1
    data: str = ""
    workdir: str = ""

    def override(self, **values) -> "RunConfig":
        """Apply every non-None value (command-line flags win over the file)."""
        known = {f.name for f in fields(self)}
        return replace(self, **{k: v for k, v in values.items() if v is not None and k in known})

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n"
                       for k, v in asdict(self).items())


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    casts = {"int": int, "float": float, "str": str}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise DfsmcError(f"{source}:{lineno}: expected key=value")
        if key not in types:
            raise DfsmcError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = casts[types[key]](value)
        except ValueError:
            raise DfsmcError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        return parse_config(path.read_text(encoding="utf-8"), str(path))
    except OSError as exc:
        raise DfsmcError(f"{path}: {exc.strerror}") from None


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_text(), encoding="utf-8")
