"""Experiment configuration files: a flat TOML schema with one [[client]]
block per client, plus template generation and --set overrides.

Top-level keys: method, seed, clients, rounds, batch_size, inner_epochs,
alpha, lr, eval_every, store_mode, n_public. A [dataset] table describes the
data source; each [[client]] block gives layer_widths, activation, dropout,
speed.
"""
from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .nn import ModelSpec
from .orchestrator import ConfigError, DatasetConfig, ExperimentConfig

_TOP_DEFAULTS = {
    "batch_size": 32,
    "inner_epochs": 3,
    "alpha": 1.0,
    "lr": 0.001,
    "eval_every": 10.0,
    "store_mode": "latest",
    "n_public": 10,
}

_DATASET_DEFAULTS = {
    "kind": "synthetic",
    "class_count": 10,
    "input_dim": 784,
    "n_per_class": 100,
    "synthetic_std": 0.1,
    "test_fraction": 0.2,
    "subtract_mean": True,
}


def _typed(raw: dict, key: str, kinds, where: str = "config"):
    value = raw[key]
    if kinds is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kinds) or isinstance(value, bool) and kinds is not bool:
        raise ConfigError(f"{where}: field {key!r} must be {getattr(kinds, '__name__', kinds)}, "
                          f"got {value!r}")
    return value


def parse_config(text: str) -> dict:
    """TOML text -> raw config dict (defaults folded in, nothing validated
    beyond types). The returned dict is the reproducible config snapshot."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config is not valid TOML: {e}") from None

    for key in ("method", "seed", "clients", "rounds"):
        if key not in raw:
            raise ConfigError(f"config: required field {key!r} is missing")
    merged = dict(_TOP_DEFAULTS)
    merged.update({k: v for k, v in raw.items() if k not in ("dataset", "client")})
    dataset = dict(_DATASET_DEFAULTS)
    dataset.update(raw.get("dataset", {}))
    merged["dataset"] = dataset
    merged["client"] = raw.get("client", [])
    return merged


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply repeatable --set key=value pairs; dotted keys reach the dataset
    table (e.g. dataset.limit=5000). Client blocks are not overridable."""
    out = {**raw, "dataset": dict(raw["dataset"])}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value_text = item.partition("=")
        key = key.strip()
        try:
            value = tomllib.loads(f"v = {value_text}")["v"]
        except tomllib.TOMLDecodeError:
            value = value_text.strip()
        if key.startswith("dataset."):
            out["dataset"][key[len("dataset."):]] = value
        elif "." in key or key == "client":
            raise ConfigError(f"override key {key!r} is not a top-level or dataset field")
        else:
            out[key] = value
    return out


def build_experiment(raw: dict) -> ExperimentConfig:
    """Raw config dict -> validated ExperimentConfig."""
    blocks = raw.get("client", [])
    declared = _typed(raw, "clients", int)
    if declared != len(blocks):
        raise ConfigError(
            f"config: 'clients' is {declared} but {len(blocks)} [[client]] blocks are present"
        )

    specs, speeds = [], []
    for k, block in enumerate(blocks):
        where = f"client block {k}"
        for field in ("layer_widths",):
            if field not in block:
                raise ConfigError(f"{where}: required field {field!r} is missing")
        widths = block["layer_widths"]
        if not isinstance(widths, list) or not all(
            isinstance(w, int) and not isinstance(w, bool) for w in widths
        ):
            raise ConfigError(f"{where}: layer_widths must be a list of integers")
        try:
            specs.append(
                ModelSpec(
                    layer_widths=tuple(widths),
                    activation=block.get("activation", "relu"),
                    dropout_rate=float(block.get("dropout", 0.0)),
                )
            )
        except ValueError as e:
            raise ConfigError(f"{where}: {e}") from None
        speeds.append(_typed({"speed": block.get("speed", 1.0)}, "speed", float, where))

    ds_raw = raw["dataset"]
    known = {
        "kind", "class_count", "input_dim", "n_per_class", "synthetic_std",
        "test_fraction", "images", "labels", "test_images", "test_labels",
        "limit", "subtract_mean",
    }
    unknown = set(ds_raw) - known
    if unknown:
        raise ConfigError(f"dataset: unknown fields {sorted(unknown)}")
    dataset = DatasetConfig(
        kind=_typed(ds_raw, "kind", str, "dataset"),
        class_count=_typed(ds_raw, "class_count", int, "dataset"),
        input_dim=_typed(ds_raw, "input_dim", int, "dataset"),
        n_per_class=_typed(ds_raw, "n_per_class", int, "dataset"),
        synthetic_std=_typed(ds_raw, "synthetic_std", float, "dataset"),
        test_fraction=_typed(ds_raw, "test_fraction", float, "dataset"),
        images=ds_raw.get("images"),
        labels=ds_raw.get("labels"),
        test_images=ds_raw.get("test_images"),
        test_labels=ds_raw.get("test_labels"),
        limit=ds_raw.get("limit"),
        subtract_mean=_typed(ds_raw, "subtract_mean", bool, "dataset"),
    )

    cfg = ExperimentConfig(
        method=_typed(raw, "method", str),
        seed=_typed(raw, "seed", int),
        rounds=_typed(raw, "rounds", int),
        client_specs=specs,
        client_speeds=speeds,
        dataset=dataset,
        batch_size=_typed(raw, "batch_size", int),
        inner_epochs=_typed(raw, "inner_epochs", int),
        alpha=_typed(raw, "alpha", float),
        lr=_typed(raw, "lr", float),
        eval_every=_typed(raw, "eval_every", float),
        store_mode=_typed(raw, "store_mode", str),
        n_public=_typed(raw, "n_public", int),
    )
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path, overrides: list[str] | None = None) -> tuple[ExperimentConfig, dict]:
    with open(path, "r", encoding="utf-8") as f:
        raw = parse_config(f.read())
    if overrides:
        raw = apply_overrides(raw, overrides)
    return build_experiment(raw), raw


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot render {type(value).__name__} as TOML")


def dump_toml(raw: dict) -> str:
    """Render a raw config dict back to TOML (known schema only)."""
    lines = []
    for key, value in raw.items():
        if key in ("dataset", "client"):
            continue
        lines.append(f"{key} = {_toml_value(value)}")
    lines.append("")
    lines.append("[dataset]")
    for key, value in raw["dataset"].items():
        if value is not None:
            lines.append(f"{key} = {_toml_value(value)}")
    for block in raw.get("client", []):
        lines.append("")
        lines.append("[[client]]")
        for key, value in block.items():
            lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


# Desk-scale stand-ins for the ten published architectures: the first five
# are shallower (two hidden layers), the last five deeper (three hidden
# layers), widths scaled to 1/4 of the published filter counts, dropout rates
# kept as published.
_HETEROGENEOUS_CLIENTS = [
    {"layer_widths": [784, 32, 64, 10], "dropout": 0.2},
    {"layer_widths": [784, 32, 96, 10], "dropout": 0.2},
    {"layer_widths": [784, 32, 128, 10], "dropout": 0.2},
    {"layer_widths": [784, 64, 64, 10], "dropout": 0.3},
    {"layer_widths": [784, 64, 128, 10], "dropout": 0.4},
    {"layer_widths": [784, 16, 32, 64, 10], "dropout": 0.2},
    {"layer_widths": [784, 16, 32, 48, 10], "dropout": 0.2},
    {"layer_widths": [784, 32, 48, 64, 10], "dropout": 0.2},
    {"layer_widths": [784, 32, 32, 32, 10], "dropout": 0.3},
    {"layer_widths": [784, 32, 32, 50, 10], "dropout": 0.3},
]


def _client_block(layer_widths, dropout, activation="relu", speed=1.0) -> dict:
    return {
        "layer_widths": list(layer_widths),
        "activation": activation,
        "dropout": dropout,
        "speed": speed,
    }


def template_config(name: str) -> dict:
    """Built-in config templates; all keep the published defaults of ten
    clients, lr 0.001, alpha 1, three inner batches of 32."""
    base = {
        "method": "fedhe",
        "seed": 42,
        "clients": 10,
        "rounds": 600,
        **_TOP_DEFAULTS,
        "eval_every": 60.0,
    }
    if name == "homogeneous":
        base["client"] = [_client_block([784, 32, 32, 50, 10], 0.3) for _ in range(10)]
        base["dataset"] = {**_DATASET_DEFAULTS, "n_per_class": 400}
    elif name == "heterogeneous":
        base["client"] = [
            _client_block(b["layer_widths"], b["dropout"]) for b in _HETEROGENEOUS_CLIENTS
        ]
        base["dataset"] = {**_DATASET_DEFAULTS, "n_per_class": 400}
    elif name == "synthetic-smoke":
        base["rounds"] = 40
        base["eval_every"] = 10.0
        base["client"] = [_client_block([8, 16, 4], 0.0) for _ in range(10)]
        base["dataset"] = {
            **_DATASET_DEFAULTS,
            "class_count": 4,
            "input_dim": 8,
            "n_per_class": 100,
            "test_fraction": 0.25,
        }
    else:
        raise ConfigError(
            f"unknown template {name!r}; available: homogeneous, heterogeneous, synthetic-smoke"
        )
    return base
