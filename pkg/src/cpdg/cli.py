"""``cpdg`` command line: ingest, generate, pretrain, finetune, eval, sample-debug.

Runs are driven by a JSON config with sections ``data``, ``backbone``,
``sampler``, ``loss``, ``pretrain``, ``finetune``, ``eval`` and a top-level
``seed``.  Artifacts go to content-addressed directories under
``$CPDG_RUN_DIR`` (default ``./runs``): ``pretrain-<hash>`` keyed by the
settings that affect pre-training and ``finetune-<hash>`` keyed by the whole
config.  Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import fcntl
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .dgnn import BackboneConfig, default_time_scale, preset, save_memory
from .finetune import EIEConfig, FinetuneConfig, evaluate_saved, finetune
from .graph import GeneratorConfig, TemporalGraph, chrono_split, generate_synthetic, ingest_csv, load_cache, save_cache
from .pretrain import CheckpointSequence, LossConfig, PretrainConfig, pretrain
from .sampler import SamplerConfig, chrono_probs, reverse_chrono_probs, sample_eps_dfs, sample_eta_bfs, save_plan
from .sampler import precompute_sample_plan
from .tensor import load_params, save_params

logger = logging.getLogger("cpdg")

_OPT = object()  # marks keys whose value may be null

# section -> key -> (allowed types, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "source": ((str,), "synthetic"),          # synthetic | csv | cache
        "path": ((str, _OPT), None),
        "generator": ((dict,), {}),
        "generator_seed": ((int,), 0),
        "pretrain_ratio": ((float,), 0.6),
        "downstream_path": ((str, _OPT), None),   # field transfer: a separate downstream graph
    },
    "backbone": {
        "preset": ((str,), "tgn"),
        "embed_fn": ((str, _OPT), None),
        "msg_fn": ((str, _OPT), None),
        "agg_fn": ((str, _OPT), None),
        "mem_fn": ((str, _OPT), None),
        "memory_dim": ((int,), 32),
        "embed_dim": ((int,), 32),
        "time_dim": ((int,), 16),
        "msg_dim": ((int, _OPT), None),
        "embed_degree": ((int,), 10),
        "node_embedding": ((bool,), True),
        "time_scale": ((float, _OPT), None),
    },
    "sampler": {
        "eta": ((int,), 20),
        "epsilon": ((int,), 20),
        "depth": ((int,), 2),
        "tau": ((float,), 1.0),
    },
    "loss": {
        "alpha": ((float,), 1.0),
        "beta": ((float,), 0.5),
        "negatives_per_edge": ((int,), 1),
        "ablation": ((bool,), False),
    },
    "pretrain": {
        "epochs": ((int,), 3),
        "batch_size": ((int,), 256),
        "lr": ((float,), 1e-3),
        "optimizer": ((str,), "adam"),
        "checkpoints": ((int,), 10),
        "anchor_both": ((bool,), False),
        "memory_persist_across_epochs": ((bool,), False),
        "dtype": ((str,), "float32"),
    },
    "finetune": {
        "task": ((str,), "link-prediction"),
        "mode": ((str,), "full"),
        "init": ((str,), "pretrained"),           # pretrained | random
        "epochs": ((int,), 10),
        "batch_size": ((int,), 256),
        "lr": ((float,), 1e-3),
        "optimizer": ((str,), "adam"),
        "patience": ((int,), 3),
        "ratios": ((list,), [0.8, 0.1, 0.1]),
        "mlp_hidden": ((int, _OPT), None),
    },
    "eval": {
        "eval_seed": ((int,), 2024),
        "eval_negatives": ((int,), 1),
    },
}
_PRETRAIN_SECTIONS = ("data", "backbone", "sampler", "loss", "pretrain", "seed")


class ConfigError(ValueError):
    """Schema violation; ``path`` names the offending key."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


class UsageError(RuntimeError):
    """Missing prerequisite artifact or bad invocation (exit 2)."""


# -- config -----------------------------------------------------------------------

def default_config() -> dict:
    cfg = {sec: {k: copy.deepcopy(v[1]) for k, v in keys.items()} for sec, keys in SCHEMA.items()}
    cfg["seed"] = 0
    return cfg


def _check_value(path, value, types):
    if value is None:
        if _OPT in types:
            return None
        raise ConfigError(path, "may not be null")
    if bool in types:
        if isinstance(value, bool):
            return value
        raise ConfigError(path, f"expected bool, got {type(value).__name__}")
    if isinstance(value, bool):
        raise ConfigError(path, "expected a number or string, got bool")
    if float in types and isinstance(value, (int, float)):
        return float(value)
    for t in types:
        if t is not _OPT and isinstance(value, t):
            return value
    names = "/".join(t.__name__ for t in types if t is not _OPT)
    raise ConfigError(path, f"expected {names}, got {type(value).__name__}")


def validate_config(raw: dict) -> dict:
    """Merge ``raw`` over the defaults, rejecting unknown keys and mistyped values."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    cfg = default_config()
    for sec, body in raw.items():
        if sec == "seed":
            if isinstance(body, bool) or not isinstance(body, int):
                raise ConfigError("seed", "expected int")
            cfg["seed"] = body
            continue
        if sec not in SCHEMA:
            raise ConfigError(sec, "unknown section")
        if not isinstance(body, dict):
            raise ConfigError(sec, "section must be an object")
        for key, value in body.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{sec}.{key}", "unknown key")
            cfg[sec][key] = _check_value(f"{sec}.{key}", value, SCHEMA[sec][key][0])
    _semantic_checks(cfg)
    return cfg


def _semantic_checks(cfg):
    gen_fields = {f.name for f in fields(GeneratorConfig)}
    for key in cfg["data"]["generator"]:
        if key not in gen_fields:
            raise ConfigError(f"data.generator.{key}", "unknown key")
    checks = [
        ("data.source", lambda: cfg["data"]["source"] in ("synthetic", "csv", "cache"), "synthetic, csv or cache"),
        ("data.path", lambda: cfg["data"]["source"] == "synthetic" or cfg["data"]["path"], "required for csv/cache"),
        ("data.pretrain_ratio", lambda: 0.0 < cfg["data"]["pretrain_ratio"] < 1.0, "must lie in (0, 1)"),
        ("finetune.init", lambda: cfg["finetune"]["init"] in ("pretrained", "random"), "pretrained or random"),
        ("pretrain.dtype", lambda: cfg["pretrain"]["dtype"] in ("float32", "float64"), "float32 or float64"),
    ]
    for path, ok, msg in checks:
        if not ok():
            raise ConfigError(path, msg)
    # delegate range checks to the owning dataclasses
    builders = [("backbone", lambda: backbone_config(cfg)), ("sampler", lambda: sampler_config(cfg)),
                ("loss", lambda: LossConfig(**cfg["loss"])), ("pretrain", lambda: pretrain_config(cfg)),
                ("finetune", lambda: finetune_configs(cfg)), ("data.generator", lambda: _generator(cfg).validate())]
    for sec, build in builders:
        try:
            build()
        except (TypeError, ValueError) as exc:
            raise ConfigError(sec, str(exc)) from exc


def backbone_config(cfg) -> BackboneConfig:
    b = dict(cfg["backbone"])
    name = b.pop("preset")
    overrides = {k: v for k, v in b.items() if v is not None or k in ("msg_dim", "time_scale")}
    for k in ("embed_fn", "msg_fn", "agg_fn", "mem_fn"):
        if b[k] is None:
            overrides.pop(k, None)
    return preset(name, **overrides)


def sampler_config(cfg) -> SamplerConfig:
    return SamplerConfig(seed=cfg["seed"], **cfg["sampler"])


def pretrain_config(cfg) -> PretrainConfig:
    p = {k: v for k, v in cfg["pretrain"].items() if k != "dtype"}
    return PretrainConfig(seed=cfg["seed"], **p)


def finetune_configs(cfg) -> tuple[FinetuneConfig, EIEConfig]:
    f = cfg["finetune"]
    ft = FinetuneConfig(task=f["task"], epochs=f["epochs"], batch_size=f["batch_size"], lr=f["lr"],
                        optimizer=f["optimizer"], seed=cfg["seed"], patience=f["patience"], ratios=tuple(f["ratios"]),
                        **cfg["eval"])
    return ft, EIEConfig(f["mode"], f["mlp_hidden"])


def _generator(cfg) -> GeneratorConfig:
    return GeneratorConfig(**cfg["data"]["generator"])


def apply_overrides(raw: dict, sets: list[str]) -> dict:
    raw = copy.deepcopy(raw)
    for item in sets:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        path, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        parts = path.split(".")
        if parts == ["seed"]:
            raw["seed"] = value
            continue
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(path, "cannot descend into a non-object")
        node[parts[-1]] = value
    return raw


def config_hash(cfg: dict, sections=None) -> str:
    part = cfg if sections is None else {k: cfg[k] for k in sections}
    blob = json.dumps(part, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str | None, sets: list[str]) -> dict:
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return validate_config(apply_overrides(raw, sets))


# -- run directories ----------------------------------------------------------------

def run_root() -> Path:
    return Path(os.environ.get("CPDG_RUN_DIR", "runs"))


@contextmanager
def locked_run(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / ".lock").open("w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield directory
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _complete(directory: Path) -> bool:
    return (directory / "COMPLETE").exists()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- data ---------------------------------------------------------------------------

def _read_graph(source: str, path: str | None, cfg) -> TemporalGraph:
    if source == "synthetic":
        return generate_synthetic(_generator(cfg), cfg["data"]["generator_seed"])
    if source == "csv":
        return ingest_csv(path)
    return load_cache(path)


def load_segments(cfg) -> tuple[TemporalGraph, TemporalGraph]:
    """(pre-training segment, downstream segment) per the ``data`` section."""
    d = cfg["data"]
    g = _read_graph(d["source"], d["path"], cfg)
    if d["downstream_path"]:
        suffix = Path(d["downstream_path"]).suffix
        down = ingest_csv(d["downstream_path"]) if suffix == ".csv" else load_cache(d["downstream_path"])
        return g, down
    split = chrono_split(g, (d["pretrain_ratio"], 1.0 - d["pretrain_ratio"]))
    return split.segment(g, 0), split.segment(g, 1)


# -- commands -------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    g = ingest_csv(args.csv)
    save_cache(g, args.out)
    print(json.dumps({"events": g.num_events, "nodes": g.num_nodes, **g.stats}))
    return 0


def cmd_generate(args) -> int:
    spec = json.loads(Path(args.spec).read_text()) if args.spec else {}
    unknown = set(spec) - {f.name for f in fields(GeneratorConfig)}
    if unknown:
        raise ConfigError(f"generator.{sorted(unknown)[0]}", "unknown key")
    gcfg = GeneratorConfig(**spec)
    g = generate_synthetic(gcfg, args.seed)
    save_cache(g, args.out)
    print(json.dumps({"events": g.num_events, "nodes": g.num_nodes}))
    return 0


def _pretrain_dir(cfg) -> Path:
    return run_root() / f"pretrain-{config_hash(cfg, _PRETRAIN_SECTIONS)}"


def run_pretrain(cfg, force: bool = False) -> Path:
    out = _pretrain_dir(cfg)
    with locked_run(out):
        if _complete(out) and not force:
            logger.info("reusing completed run %s", out)
            return out
        (out / "COMPLETE").unlink(missing_ok=True)
        _write_json(out / "config.json", {k: cfg[k] for k in _PRETRAIN_SECTIONS})
        pre, _ = load_segments(cfg)
        save_cache(pre, out / "graph.ctdg")
        bb = backbone_config(cfg)
        if bb.time_scale is None:
            bb = replace(bb, time_scale=default_time_scale(pre))
        scfg, pcfg = sampler_config(cfg), pretrain_config(cfg)
        plan = precompute_sample_plan(pre, scfg, anchor_both=pcfg.anchor_both)
        save_plan(plan, out / "plan.cpln")
        dtype = np.dtype(cfg["pretrain"]["dtype"])
        res = pretrain(pre, bb, scfg, LossConfig(**cfg["loss"]), pcfg, plan=plan,
                       log_path=out / "train_log.jsonl", dtype=dtype)
        save_params(res.params, out / "params.cpar")
        res.checkpoints.save(out / "checkpoints")
        save_memory(res.memory, out / "final_memory.cmem", float(pre.ts[-1]))
        _write_json(out / "backbone.json", res.backbone.to_dict())
        (out / "COMPLETE").write_text("ok\n")
    return out


def cmd_pretrain(args, cfg) -> int:
    out = run_pretrain(cfg, args.force)
    print(out)
    return 0


def _finetune_dir(cfg) -> Path:
    return run_root() / f"finetune-{config_hash(cfg)}"


def _pretrained_artifacts(cfg, create: bool):
    pdir = _pretrain_dir(cfg)
    if not _complete(pdir):
        if not create:
            raise UsageError(f"no completed pre-training run at {pdir}")
        run_pretrain(cfg)
    bb = BackboneConfig(**json.loads((pdir / "backbone.json").read_text()))
    return bb, load_params(pdir / "params.cpar"), CheckpointSequence.load(pdir / "checkpoints")


def cmd_finetune(args, cfg) -> int:
    out = _finetune_dir(cfg)
    with locked_run(out):
        if _complete(out) and not args.force:
            print(out)
            return 0
        (out / "COMPLETE").unlink(missing_ok=True)
        _write_json(out / "config.json", cfg)
        _, down = load_segments(cfg)
        bb, params, seq = _pretrained_artifacts(cfg, create=True)
        ft, eie = finetune_configs(cfg)
        dtype = np.dtype(cfg["pretrain"]["dtype"])
        init = params if cfg["finetune"]["init"] == "pretrained" else None
        res = finetune(down, bb, init, seq, ft, eie, dtype=dtype)
        save_params(res.params, out / "params.cpar")
        _write_json(out / "metrics.json", _report(res.metrics))
        _write_json(out / "history.json", res.history)
        (out / "COMPLETE").write_text("ok\n")
    print(json.dumps(_report(res.metrics)))
    return 0


def _report(metrics: dict) -> dict:
    keys = ("task", "mode", "seed", "auc", "ap", "micro_f1", "epochs_run", "best_epoch")
    return {k: metrics[k] for k in keys if k in metrics}


def cmd_eval(args, cfg) -> int:
    out = _finetune_dir(cfg)
    if not (out / "params.cpar").exists():
        raise UsageError(f"no fine-tuned model at {out}; run `cpdg finetune` with this config first")
    _, down = load_segments(cfg)
    bb, _, seq = _pretrained_artifacts(cfg, create=False)
    ft, eie = finetune_configs(cfg)
    metrics = evaluate_saved(down, bb, load_params(out / "params.cpar"), seq, ft, eie,
                             dtype=np.dtype(cfg["pretrain"]["dtype"]))
    report = _report(metrics)
    _write_json(out / "eval.json", report)
    print(json.dumps(report))
    return 0


def _fmt(p) -> str:
    return "[" + ", ".join(f"{x:.4f}" for x in p) + "]"


def cmd_sample_debug(args, cfg) -> int:
    tau = cfg["sampler"]["tau"]
    if args.times is not None:
        times = [float(x) for x in args.times.split(",") if x.strip()]
        if args.time is None:
            raise UsageError("--times needs --time")
        print(f"chrono  {_fmt(chrono_probs(times, args.time, tau))}")
        print(f"reverse {_fmt(reverse_chrono_probs(times, args.time, tau))}")
        return 0
    if args.node is None or args.time is None:
        raise UsageError("sample-debug needs --node and --time (or --times and --time)")
    g = _read_graph(cfg["data"]["source"], cfg["data"]["path"], cfg)
    if not 0 <= args.node < g.num_nodes:
        raise UsageError(f"node {args.node} outside 0..{g.num_nodes - 1}")
    nbrs = g.neighbors_before(args.node, args.time)
    print(f"node {args.node} at t={args.time}: {len(nbrs)} earlier interactions")
    if nbrs:
        times = [t for _, t in nbrs]
        print(f"neighbors {[u for u, _ in nbrs]}")
        print(f"chrono  {_fmt(chrono_probs(times, args.time, tau))}")
        print(f"reverse {_fmt(reverse_chrono_probs(times, args.time, tau))}")
    scfg = sampler_config(cfg)
    for label, sub in (("temporal-positive", sample_eta_bfs(g, args.node, args.time, scfg, "chronological")),
                       ("temporal-negative", sample_eta_bfs(g, args.node, args.time, scfg, "reverse")),
                       ("structural-positive", sample_eps_dfs(g, args.node, args.time, scfg))):
        print(f"{label}: {[(int(n), int(h)) for n, h in zip(sub.nodes, sub.hops)]}")
    return 0


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpdg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="CSV event log -> binary graph cache")
    p.add_argument("csv")
    p.add_argument("out")

    p = sub.add_parser("generate", help="synthetic planted-drift graph -> binary graph cache")
    p.add_argument("spec", nargs="?", help="JSON generator spec")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)

    for name in ("pretrain", "finetune", "eval", "sample-debug"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        if name in ("pretrain", "finetune"):
            p.add_argument("--force", action="store_true", help="recompute a completed run")
        if name == "sample-debug":
            p.add_argument("--node", type=int)
            p.add_argument("--time", type=float)
            p.add_argument("--times", help="comma-separated neighbor times (no graph needed)")
    return ap


_COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval, "sample-debug": cmd_sample_debug}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "ingest":
            return cmd_ingest(args)
        if args.command == "generate":
            return cmd_generate(args)
        cfg = load_config(args.config, args.set)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
