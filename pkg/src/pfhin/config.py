"""Flat run configuration: one registry of every tunable, preset stacks,
strict parsing, and a content digest for cache keys.

Precedence, low to high: built-in default, preset, config file, --set
overrides. Unknown keys are rejected everywhere.
"""

import hashlib

from .errors import ConfigError

# name -> (type, default). Booleans parse from {true,false,1,0}.
REGISTRY = {
    "seed": (int, 0),
    "walk.k": (int, 20),
    "walk.restart_prob": (float, 0.5),
    "walk.min_per_type": (int, 1),
    "walk.strategy": (str, "rank_guided"),
    "model.Q": (int, 16),
    "model.H": (int, 64),
    "model.A": (int, 4),
    "model.L": (int, 2),
    "model.max_len": (int, 64),
    "model.dropout": (float, 0.1),
    "rank.weight_betweenness": (float, 1.0 / 3.0),
    "rank.weight_eigen": (float, 1.0 / 3.0),
    "rank.weight_closeness": (float, 1.0 / 3.0),
    "pretrain.batch_size": (int, 16),
    "pretrain.epochs": (int, 20),
    "pretrain.lr": (float, 0.01),
    "pretrain.mask_rate": (float, 0.15),
    "pretrain.pos_rate": (float, 0.5),
    "pretrain.smoothing": (float, 0.9),
    "finetune.lr": (float, 0.01),
    "finetune.epochs": (int, 8),
    "finetune.link_epochs": (int, 8),
    "finetune.batch_size": (int, 32),
    "finetune.max_pairs": (int, 2400),
    "finetune.freeze_encoder": (bool, False),
    "finetune.grid": (bool, False),
    "finetune.pool": (str, "mean"),
    "finetune.eval_walks": (int, 3),
    "classify.train_ratio": (float, 0.30),
    "link.train_ratio": (float, 0.70),
    "link.lr": (float, 0.05),
    "link.freeze_encoder": (bool, True),
    "cluster.k": (int, 0),          # 0 = use the label count
    "metrics.nmi_norm": (str, "sqrt"),
    "synth.nodes_per_type": (str, "260,240,180,120"),
    "synth.communities": (int, 4),
    "synth.intra_prob": (float, 0.08),
    "synth.inter_prob": (float, 0.0015),
}

# presets override defaults; "desk" is the 1-core profile, "paper" the
# publication-scale profile (hours of compute; kept for completeness)
PRESETS = {
    "desk": {},
    "paper": {
        "model.Q": 128,
        "model.H": 768,
        "model.A": 12,
        "model.L": 12,
        "walk.restart_prob": 0.15,
        "pretrain.batch_size": 256,
        "pretrain.epochs": 20,
        "pretrain.lr": 0.001,
    },
}


def _parse_value(key, raw):
    typ, _ = REGISTRY[key]
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    if typ is bool:
        low = text.lower()
        if low in ("true", "1"):
            return True
        if low in ("false", "0"):
            return False
        raise ConfigError(f"{key}: expected true/false, got '{raw}'")
    try:
        return typ(text)
    except ValueError:
        raise ConfigError(
            f"{key}: expected {typ.__name__}, got '{raw}'") from None


def _check_key(key):
    if key not in REGISTRY:
        raise ConfigError(f"unknown config key '{key}'")


def parse_config_file(path):
    """``key = value`` lines; blank lines and # comments ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in body.split("=", 1))
            _check_key(key)
            out[key] = _parse_value(key, raw)
    return out


def resolve_config(preset=None, config_file=None, overrides=None):
    """Merge the precedence stack into a complete flat dict."""
    merged = {k: default for k, (_, default) in REGISTRY.items()}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}', expected one of "
                              f"{sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    if config_file is not None:
        merged.update(parse_config_file(config_file))
    for key, raw in (overrides or {}).items():
        _check_key(key)
        merged[key] = _parse_value(key, raw)
    return merged


def config_digest(cfg, extra=()):
    """12-hex digest of the canonical serialization plus extra tokens."""
    h = hashlib.sha256()
    for key in sorted(cfg):
        h.update(f"{key}={cfg[key]!r}\n".encode())
    for token in extra:
        h.update(f"{token}\n".encode())
    return h.hexdigest()[:12]


def write_resolved(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# resolved configuration (digest {config_digest(cfg)})\n")
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")


# bridges into the module-level config dataclasses

def model_config(cfg, v, num_types):
    from .encoder import ModelConfig
    return ModelConfig(V=v, num_types=num_types, Q=cfg["model.Q"],
                       H=cfg["model.H"], A=cfg["model.A"], L=cfg["model.L"],
                       d=2 * cfg["model.Q"], max_len=cfg["model.max_len"],
                       dropout=cfg["model.dropout"])


def walk_config(cfg):
    from .walker import WalkConfig
    return WalkConfig(k=cfg["walk.k"], restart_prob=cfg["walk.restart_prob"],
                      min_per_type=cfg["walk.min_per_type"],
                      strategy=cfg["walk.strategy"])


def pretrain_config(cfg):
    from .pretrain import PretrainConfig
    return PretrainConfig(batch_size=cfg["pretrain.batch_size"],
                          epochs=cfg["pretrain.epochs"],
                          lr=cfg["pretrain.lr"],
                          mask_rate=cfg["pretrain.mask_rate"],
                          pos_rate=cfg["pretrain.pos_rate"],
                          smoothing=cfg["pretrain.smoothing"],
                          seed=cfg["seed"])


def finetune_config(cfg, task=None):
    # link trains a pair head on frozen features by default; the other
    # tasks fine-tune the encoder end to end
    from .finetune import FinetuneConfig
    if task == "link":
        lr = cfg["link.lr"]
        epochs = cfg["finetune.link_epochs"]
        freeze = cfg["link.freeze_encoder"]
    else:
        lr = cfg["finetune.lr"]
        epochs = cfg["finetune.epochs"]
        freeze = cfg["finetune.freeze_encoder"]
    return FinetuneConfig(lr=lr, epochs=epochs,
                          batch_size=cfg["finetune.batch_size"],
                          max_pairs=cfg["finetune.max_pairs"],
                          freeze_encoder=freeze,
                          pool=cfg["finetune.pool"], seed=cfg["seed"])


def rank_weights(cfg):
    return (cfg["rank.weight_betweenness"], cfg["rank.weight_eigen"],
            cfg["rank.weight_closeness"])


def synth_spec(cfg):
    from .synth import SyntheticHinSpec
    try:
        counts = tuple(int(tok) for tok in
                       str(cfg["synth.nodes_per_type"]).split(","))
    except ValueError:
        raise ConfigError("synth.nodes_per_type must be comma-separated "
                          f"integers, got '{cfg['synth.nodes_per_type']}'") \
            from None
    return SyntheticHinSpec(nodes_per_type=counts,
                            communities=cfg["synth.communities"],
                            intra_prob=cfg["synth.intra_prob"],
                            inter_prob=cfg["synth.inter_prob"])
