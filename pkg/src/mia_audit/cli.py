"""Config-driven command line front end.

Configs are flat key=value text files: one assignment per line, full-line
`#` comments, blank lines ignored. Every key is typed and known ahead of
time; anything else is an error naming the offending line. Comma lists
express the grid-shaped values (seeds, alphas, hidden widths).

Subcommands run one stage each (gen-data, train-target, attack, evaluate,
transfer) or the whole experiment (run). Stages do not read each other's
outputs: every stage recomputes what it needs from the config's seeds, so
any artifact can be regenerated and inspected in isolation while staying
bit-consistent with the full run.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 IO error.
The MIA_AUDIT_SEED_OFFSET environment variable (integer, default 0) shifts
every configured seed, for replication sweeps without editing configs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace

from . import evaluation, figures, netcore, transfer
from .attacks import save_attack
from .dataspace import SynthConfig, generate_synthetic, save_dataset
from .errors import ConfigError, DataFormatError, NumericError
from .evaluation import FULL_SENTINEL, AuditConfig
from .target import derive_seed, train_target

# the CLI-facing name for a parsed, validated experiment description
RunConfig = AuditConfig

SEED_OFFSET_ENV = "MIA_AUDIT_SEED_OFFSET"

_INT, _FLOAT, _STR, _PATH = "int", "float", "str", "path"
_INTS, _FLOATS, _STRS, _KS = "ints", "floats", "strs", "ks"

# config key -> (value type, AuditConfig field)
SCHEMA: dict[str, tuple[str, str]] = {
    "experiment": (_STR, "experiment"),
    "classes": (_INT, "classes"),
    "feature_dim": (_INT, "feature_dim"),
    "per_class": (_INT, "per_class"),
    "mean_radius": (_FLOAT, "mean_radius"),
    "spread_min": (_FLOAT, "spread_min"),
    "spread_max": (_FLOAT, "spread_max"),
    "dropped_classes": (_INTS, "dropped_classes"),
    "alpha": (_FLOAT, "alpha"),
    "alphas": (_FLOATS, "fpr_targets"),
    "seeds": (_INTS, "seeds"),
    "attacks": (_STRS, "attacks"),
    "hidden": (_INTS, "hidden"),
    "epochs": (_INT, "epochs"),
    "learning_rate": (_FLOAT, "learning_rate"),
    "batch_size": (_INT, "batch_size"),
    "algorithm": (_STR, "algorithm"),
    "shadow_count": (_INT, "shadow_count"),
    "shadow_fraction": (_FLOAT, "shadow_fraction"),
    "qr_hidden": (_INTS, "qr_hidden"),
    "qr_epochs": (_INT, "qr_epochs"),
    "qr_learning_rate": (_FLOAT, "qr_learning_rate"),
    "qr_batch_size": (_INT, "qr_batch_size"),
    "qr_mode": (_STR, "qr_mode"),
    "marginal_score": (_STR, "marginal_score"),
    "shadow_score": (_STR, "shadow_score"),
    "qr_score": (_STR, "qr_score"),
    "clip_epsilon": (_FLOAT, "clip_epsilon"),
    "scarcity_ks": (_KS, "scarcity_ks"),
    "transfer_n": (_INT, "transfer_n"),
    "gmm_components": (_INT, "gmm_components"),
    "workers": (_INT, "workers"),
    "out_dir": (_STR, "out_dir"),
    "data_path": (_PATH, "data_path"),
}


# --- config parsing ---------------------------------------------------------


def _convert(kind: str, key: str, raw: str, where: str):
    def bad(expected):
        raise ConfigError(f"{where}: key {key!r} expects {expected}, got {raw!r}")

    if kind == _STR:
        return raw
    if kind == _PATH:
        if not os.path.exists(raw):
            raise ConfigError(f"{where}: key {key!r} names a missing file {raw!r}")
        return raw
    if kind == _INT:
        try:
            return int(raw)
        except ValueError:
            bad("an integer")
    if kind == _FLOAT:
        try:
            return float(raw)
        except ValueError:
            bad("a number")
    parts = [p.strip() for p in raw.split(",") if p.strip()] if raw.strip() else []
    try:
        if kind == _INTS:
            return tuple(int(p) for p in parts)
        if kind == _FLOATS:
            return tuple(float(p) for p in parts)
        if kind == _KS:
            return tuple(p if p == FULL_SENTINEL else int(p) for p in parts)
    except ValueError:
        bad("a comma list of numbers")
    if kind == _STRS:
        return tuple(parts)
    raise AssertionError(f"unhandled kind {kind}")


def parse_config_text(text: str, source: str = "config") -> RunConfig:
    fields: dict = {}
    seen: set[str] = set()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{source} line {lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        seen.add(key)
        kind, field_name = SCHEMA[key]
        fields[field_name] = _convert(kind, key, value, where)
    if "experiment" not in fields:
        raise ConfigError(f"{source}: missing required key 'experiment'")
    cfg = AuditConfig(**fields)
    cfg.validate()
    return cfg


def parse_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} does not exist") from None
    return parse_config_text(text, source=str(path))


def _render_value(kind: str, value) -> str:
    if kind in (_STR, _PATH):
        return str(value)
    if kind == _INT:
        return str(value)
    if kind == _FLOAT:
        return repr(float(value))
    return ",".join(str(v) for v in value)


def render_config(cfg: RunConfig) -> str:
    """Canonical echo of a config; parsing it reproduces cfg exactly."""
    lines = []
    for key, (kind, field_name) in SCHEMA.items():
        value = getattr(cfg, field_name)
        if value is None:
            continue
        lines.append(f"{key}={_render_value(kind, value)}")
    return "\n".join(lines) + "\n"


def seed_offset_from_env(environ=None) -> int:
    raw = (environ if environ is not None else os.environ).get(SEED_OFFSET_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_OFFSET_ENV} must be an integer, got {raw!r}") from None


def apply_seed_offset(cfg: RunConfig, offset: int) -> RunConfig:
    if offset == 0:
        return cfg
    return replace(cfg, seeds=tuple(s + offset for s in cfg.seeds))


# --- shared plumbing ----------------------------------------------------------


def _ensure_writable(out_dir: str) -> None:
    """Fail on an unwritable output directory before any compute is spent."""
    os.makedirs(out_dir, exist_ok=True)
    probe = os.path.join(out_dir, ".write-probe")
    with open(probe, "w", encoding="utf-8") as fh:
        fh.write("ok")
    os.remove(probe)


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: str, names: list[str]) -> None:
    """manifest.json maps every file this invocation wrote to its sha256."""
    entries = {name: _sha256(os.path.join(out_dir, name)) for name in sorted(names)}
    payload = json.dumps({"files": entries}, sort_keys=True, indent=2) + "\n"
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(payload)


def _walk_files(out_dir: str, top: str) -> list[str]:
    found = []
    for root, _, files in os.walk(os.path.join(out_dir, top)):
        rel_root = os.path.relpath(root, out_dir)
        for name in files:
            found.append(os.path.join(rel_root, name).replace(os.sep, "/"))
    return sorted(found)


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config)
    cfg = apply_seed_offset(cfg, seed_offset_from_env())
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "parallel", None):
        if args.parallel < 1:
            raise ConfigError("--parallel must be at least 1")
        cfg = replace(cfg, workers=args.parallel)
    _ensure_writable(cfg.out_dir)
    return cfg


def _pool(cfg: RunConfig):
    if cfg.data_path is not None:
        return evaluation.load_pool(cfg)
    synth = SynthConfig(
        classes=cfg.classes,
        feature_dim=cfg.feature_dim,
        per_class=cfg.per_class,
        mean_radius=cfg.mean_radius,
        spread_min=cfg.spread_min,
        spread_max=cfg.spread_max,
        seed=derive_seed(cfg.seeds[0], 1),
    )
    return generate_synthetic(synth)


def _narrow_single_attack(cfg: RunConfig) -> RunConfig:
    return replace(cfg, attacks=(cfg.attacks[0],), seeds=(cfg.seeds[0],))


def _evaluation_report(cfg: RunConfig) -> evaluation.EvalReport:
    if cfg.experiment == "sample_scarcity":
        return evaluation.run_sample_scarcity(cfg)
    if cfg.experiment == "single_attack":
        return evaluation.run_class_dropout(_narrow_single_attack(cfg))
    if cfg.experiment == "class_dropout":
        return evaluation.run_class_dropout(cfg)
    raise ConfigError(f"experiment {cfg.experiment!r} has no evaluation protocol")


# --- subcommands ---------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    data = _pool(cfg)
    save_dataset(data, os.path.join(cfg.out_dir, "dataset.txt"))
    write_manifest(cfg.out_dir, ["dataset.txt"])
    print(f"wrote {cfg.out_dir}/dataset.txt ({data.features.shape[0]} rows)")
    return 0


def _cmd_train_target(args) -> int:
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    priv, _, _, _ = evaluation.split_pool(cfg, seed)
    model = train_target(priv, list(cfg.hidden), cfg.opt(seed=derive_seed(seed, 3)))
    netcore.save_model(model, os.path.join(cfg.out_dir, "target.ckpt"))
    write_manifest(cfg.out_dir, ["target.ckpt"])
    print(f"wrote {cfg.out_dir}/target.ckpt (trained on {priv.features.shape[0]} rows)")
    return 0


def _cmd_attack(args) -> int:
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    priv, pub_att, cal_att, _ = evaluation.split_pool(cfg, seed)
    model = train_target(priv, list(cfg.hidden), cfg.opt(seed=derive_seed(seed, 3)))
    fitted = evaluation.fit_attacks(cfg, seed, model, pub_att, cal_att)
    names: list[str] = []
    for attack_name, attack in sorted(fitted.items()):
        sub = f"attack_{attack_name}"
        save_attack(attack, os.path.join(cfg.out_dir, sub))
        names.extend(_walk_files(cfg.out_dir, sub))
    write_manifest(cfg.out_dir, names)
    print(f"fitted {', '.join(sorted(fitted))} in {cfg.out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    if cfg.experiment == "transfer_diagnostics":
        return _cmd_transfer(args)
    report = _evaluation_report(cfg)
    names = evaluation.write_report_files(report, cfg.out_dir)
    names += figures.render_report_figures(cfg.out_dir)
    write_manifest(cfg.out_dir, names)
    print(f"wrote {cfg.out_dir}/report.json and {len(names) - 1} companion files")
    return 0


def _cmd_transfer(args) -> int:
    cfg = _load_config(args)
    report = transfer.run_transfer_diagnostics(
        alpha=cfg.alpha, n=cfg.transfer_n, gmm_k=cfg.gmm_components, seeds=cfg.seeds
    )
    names = transfer.write_transfer_report(report, cfg.out_dir)
    names += figures.render_transfer_figures(cfg.out_dir)
    write_manifest(cfg.out_dir, names)
    print(f"wrote {cfg.out_dir}/transfer_report.json")
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    if cfg.experiment == "transfer_diagnostics":
        return _cmd_transfer(args)
    return _cmd_evaluate(args)


# --- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mia-audit",
        description="membership-inference audit experiments from a flat key=value config",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": (_cmd_gen_data, "generate the synthetic dataset pool"),
        "train-target": (_cmd_train_target, "train the target model for the first seed"),
        "attack": (_cmd_attack, "fit the configured attacks for the first seed"),
        "evaluate": (_cmd_evaluate, "run the configured experiment and write reports"),
        "transfer": (_cmd_transfer, "run the quantile-transfer diagnostics"),
        "run": (_cmd_run, "full pipeline for the configured experiment"),
    }
    for name, (func, help_text) in commands.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("config", help="path to a key=value config file")
        cmd.add_argument("--out", help="override the configured output directory")
        if name in ("evaluate", "run"):
            cmd.add_argument("--parallel", type=int, help="worker processes for seed cells")
        cmd.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
