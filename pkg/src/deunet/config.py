"""Plain-text ``key=value`` run configuration.

Recognised keys are the fields of :class:`TrainConfig` and :class:`NetConfig`
(``r`` is shared) plus ``variant``, ``data`` and ``image_size``. Unknown keys
are rejected. Defaults are the desk-scale preset.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .experiments import DESK_NET, desk_train_config
from .network import NetConfig, NetVariant
from .training import TrainConfig

_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _coerce(key, raw, typ):
    typ = _TYPES.get(typ, typ) if isinstance(typ, str) else typ
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=desk_train_config)
    net: NetConfig = DESK_NET
    variant: NetVariant = NetVariant.full
    data: str = ""
    image_size: int = 0  # 0 keeps the archive's native size

    def items(self):
        out = {f.name: getattr(self.train, f.name) for f in dataclasses.fields(TrainConfig)}
        out.update({f.name: getattr(self.net, f.name) for f in dataclasses.fields(NetConfig)})
        out.update(variant=self.variant.value, data=self.data, image_size=self.image_size)
        return out

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in self.items().items())


def parse_run_config(text, base=None):
    base = base or RunConfig()
    train_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    net_fields = {f.name: f.type for f in dataclasses.fields(NetConfig)}
    train_kw, net_kw, top = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in train_fields or key in net_fields:
            if key in train_fields:
                train_kw[key] = _coerce(key, raw, train_fields[key])
            if key in net_fields:
                net_kw[key] = _coerce(key, raw, net_fields[key])
        elif key == "variant":
            try:
                top[key] = NetVariant(raw)
            except ValueError:
                raise ConfigurationError(f"unknown variant {raw!r}") from None
        elif key == "data":
            top[key] = raw
        elif key == "image_size":
            top[key] = _coerce(key, raw, int)
        else:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
    train = dataclasses.replace(base.train, **train_kw)
    net = dataclasses.replace(base.net, **net_kw)
    if train.r != net.r:
        raise ConfigurationError("r must agree between training and network settings")
    return dataclasses.replace(base, train=train, net=net, **top)


def load_run_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read())
