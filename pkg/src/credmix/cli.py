"""Command-line entry point: synth, train, eval, attribute, shapley-audit.

Settings resolve as command-line flags over the INI config file over built-in
defaults (a preset, when named, sits between the file and the defaults).

Config file sections::

    [run]       dataset, out, seeds, preset, train_fraction, cache_dir
    [provider]  kind, dim, endpoint, model, token_env, timeout, max_retries, backoff
    [train]     any TrainConfig field except n_agents, n_classes, dim, seed
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .data import (SplitSpec, SynthSpec, ground_truth_record, load_dataset, planted_alpha,
                   save_dataset, split_manifest, stratified_split, synth_generate)
from .embedding import EmbeddingCache, ProviderConfig, embed_dataset, make_provider
from .errors import ConfigurationError, ContractError, CredmixError, UsageError
from .evaluation import (attribution_report, evaluate, fit_thresholds, multi_seed_aggregate,
                         predict_scores, render_report)
from .game import (CoalitionGame, game_table, rewards_and_advantage, shapley_exact,
                   shapley_mc)
from .training import (PRESETS, TrainConfig, load_checkpoint, save_checkpoint,
                       stream, train)

STREAM_AUDIT = 5
AUDIT_BUDGET = 2000
TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
RUN_ONLY = {"n_agents", "n_classes", "dim", "seed"}


# ---------------------------------------------------------------- settings

def _read_config(path: str | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is None:
        return cp
    if not Path(path).is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cp.read(path)
    return cp


def _parse_bool(key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"{key}: expected a boolean, got {text!r}")


def _coerce(key: str, text: str) -> Any:
    default = next(f.default for f in dataclasses.fields(TrainConfig) if f.name == key)
    try:
        if key in ("agent_hidden", "fusion_hidden"):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        if key in ("mc_budget", "log_every"):
            return None if text.strip().lower() in ("", "none") else int(text)
        if isinstance(default, bool):
            return _parse_bool(key, text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise UsageError(f"[train] {key}: cannot parse {text!r}") from None
    return text


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise UsageError(f"--seeds: expected comma-separated integers, got {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise UsageError("--seeds: need at least one nonnegative seed")
    return seeds


def _pick(flag, cp: configparser.ConfigParser, section: str, key: str, default=None):
    if flag is not None:
        return flag
    if cp.has_option(section, key):
        return cp.get(section, key)
    return default


def _seeds(args, cp) -> list[int]:
    if args.seeds is not None:
        return _parse_seeds(args.seeds)
    if args.seed is not None:
        return [args.seed]
    return _parse_seeds(cp.get("run", "seeds", fallback="0"))


def _provider_config(args, cp) -> ProviderConfig:
    sec = cp["provider"] if cp.has_section("provider") else {}
    kind = getattr(args, "provider", None) or sec.get("kind", "stub")
    dim = getattr(args, "embed_dim", None) or int(sec.get("dim", 64))
    kw: dict[str, Any] = {"kind": kind, "dim": int(dim)}
    for key, cast in (("endpoint", str), ("model", str), ("token_env", str), ("timeout", float),
                      ("max_retries", int), ("backoff", float)):
        if key in sec:
            kw[key] = cast(sec[key])
    return ProviderConfig(**kw)


_TRAIN_FLAGS = {"epochs": "epochs", "batch_size": "batch_size", "lr": "learning_rate",
                "lambda_pg": "lambda_pg", "lambda_shap": "lambda_shap", "ema_beta": "ema_beta",
                "mc_budget": "mc_budget", "shapley_interval": "shapley_interval"}
_ABLATIONS = {"full": {}, "centralized": {"centralized_only": True},
              "no-decision-matrix": {"no_decision_matrix": True},
              "no-contribution": {"no_contribution_losses": True}}


def _train_overrides(args, cp) -> dict[str, Any]:
    """Preset, then [train] section, then flags."""
    preset = _pick(args.preset, cp, "run", "preset")
    out: dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"--preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        out.update(PRESETS[preset])
    if cp.has_section("train"):
        for key, text in cp["train"].items():
            if key not in TRAIN_KEYS or key in RUN_ONLY:
                raise UsageError(f"[train] {key}: not a settable training option")
            out[key] = _coerce(key, text)
    for flag, key in _TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            out[key] = val
    ablation = getattr(args, "ablation", None)
    if ablation:
        for key in ("centralized_only", "no_decision_matrix", "no_contribution_losses"):
            out[key] = False
        out.update(_ABLATIONS[ablation])
    return out


def _load_embedded(dataset_path: str, provider: ProviderConfig, cache_dir: str | None):
    ds = load_dataset(dataset_path)
    if ds.mode == "vector":
        return ds, embed_dataset(ds)
    cache = EmbeddingCache(cache_dir) if cache_dir else None
    return ds, embed_dataset(ds, make_provider(provider), cache)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _jsonable(x):
    """Replace non-finite floats (infinite thresholds) with strings."""
    if isinstance(x, float) and not np.isfinite(x):
        return "inf" if x > 0 else "-inf" if x < 0 else "nan"
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


# ---------------------------------------------------------------- commands

def cmd_synth(args, cp) -> int:
    if args.dim < args.classes:
        raise UsageError(f"--dim ({args.dim}) must be >= --classes ({args.classes})")
    seed = _seeds(args, cp)[0]
    alpha = planted_alpha(args.agents, args.classes, args.strength)
    spec = SynthSpec(args.n_cases, args.agents, args.classes, args.dim, alpha,
                     args.noise_std, seed)
    ds, gt = synth_generate(spec)
    out = Path(_pick(args.out, cp, "run", "out", "."))
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out / "dataset.jsonl")
    record = ground_truth_record(gt, ds.class_names, ds.partition_names)
    record.update(seed=seed, noise_std=args.noise_std, strength=args.strength)
    _write_json(out / "informative_map.json", record)
    print(f"wrote {out / 'dataset.jsonl'} ({len(ds.cases)} cases) and "
          f"{out / 'informative_map.json'}")
    return 0


def cmd_train(args, cp) -> int:
    dataset = _pick(args.dataset, cp, "run", "dataset")
    if dataset is None:
        raise UsageError("--dataset (or [run] dataset) is required")
    provider = _provider_config(args, cp)
    cache_dir = _pick(args.cache_dir, cp, "run", "cache_dir")
    frac = float(_pick(args.train_fraction, cp, "run", "train_fraction", 0.75))
    out = Path(_pick(args.out, cp, "run", "out", "runs"))
    overrides = _train_overrides(args, cp)
    ds, emb = _load_embedded(dataset, provider, cache_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in _seeds(args, cp):
        tr, te = stratified_split(ds, SplitSpec(frac, seed))
        split_path = out / f"split_seed{seed}.json"
        _write_json(split_path, {**split_manifest(tr, te, seed), "train_fraction": frac})
        cfg = TrainConfig(n_agents=emb.n_agents, n_classes=emb.n_classes, dim=emb.dim, seed=seed,
                          **overrides)
        trace_path = out / f"trace_seed{seed}.jsonl"
        trace_path.write_text("")
        res = train(cfg, emb.select(tr.ids), trace_path=trace_path)
        ck = res.checkpoint
        ck.meta.update(dataset=str(Path(dataset).resolve()), split=split_path.name,
                       provider=dataclasses.asdict(provider), cache_dir=cache_dir,
                       class_names=list(ds.class_names), agent_names=list(ds.partition_names))
        ck_path = out / f"checkpoint_seed{seed}.json"
        save_checkpoint(ck_path, ck)
        load_checkpoint(ck_path)   # validate what was written
        last = res.trace[-1] if res.trace else {}
        print(f"seed {seed}: {ck.step} steps, final total loss {last.get('total', float('nan')):.6f}"
              f" -> {ck_path}")
    return 0


def _context(ck_path: str, dataset_flag: str | None, split_flag: str | None):
    """Checkpoint plus its dataset, embedded data, and train/test split."""
    ck = load_checkpoint(ck_path)
    meta = ck.meta
    dataset = dataset_flag or meta.get("dataset")
    if dataset is None:
        raise UsageError(f"{ck_path}: no dataset recorded; pass --dataset")
    provider = ProviderConfig(**meta["provider"]) if "provider" in meta else ProviderConfig()
    ds, emb = _load_embedded(dataset, provider, meta.get("cache_dir"))
    cfg = ck.config
    if (emb.n_agents, emb.n_classes, emb.dim) != (cfg.n_agents, cfg.n_classes, cfg.dim):
        raise ContractError(
            f"{ck_path}: checkpoint expects N={cfg.n_agents}, C={cfg.n_classes}, D={cfg.dim}; "
            f"dataset {dataset} has N={emb.n_agents}, C={emb.n_classes}, D={emb.dim}")
    split_path = Path(split_flag) if split_flag else (
        Path(ck_path).parent / meta["split"] if "split" in meta else None)
    if split_path is None:
        raise UsageError(f"{ck_path}: no split manifest recorded; pass --split")
    manifest = json.loads(split_path.read_text())
    return ck, ds, emb, manifest


def cmd_eval(args, cp) -> int:
    summaries = []
    per_ck = []
    class_names = None
    for path in args.checkpoints:
        ck, ds, emb, manifest = _context(path, args.dataset, None)
        if class_names is not None and list(ds.class_names) != class_names:
            raise ContractError(f"{path}: class names differ from the first checkpoint")
        class_names = list(ds.class_names)
        summary, thr = evaluate(ck.params, emb.select(manifest["train_ids"]),
                                emb.select(manifest["test_ids"]), class_names)
        summaries.append(summary)
        per_ck.append({"checkpoint": str(path), "seed": ck.config.seed,
                       "thresholds": thr.thresholds.tolist()})
    agg = multi_seed_aggregate(summaries)
    doc = {**agg.to_json(), "checkpoints": per_ck}
    out = Path(args.out or Path(args.checkpoints[0]).parent) / "metrics.json"
    _write_json(out, _jsonable(doc))
    m = doc["macro"]
    print(f"macro AUC {_fmt(m['AUC'])}, macro accuracy {_fmt(m['Accuracy'])} -> {out}")
    return 0


def _fmt(stat: dict) -> str:
    if stat["mean"] is None:
        return "N/A"
    return f"{stat['mean']:.4f} +/- {stat['std']:.4f}"


def _case_ids(args) -> list[str]:
    ids = list(args.case or [])
    if args.cases_file:
        ids += [ln.strip() for ln in Path(args.cases_file).read_text().splitlines() if ln.strip()]
    if not ids:
        raise UsageError("give --case ID (repeatable) or --cases-file")
    return ids


def cmd_attribute(args, cp) -> int:
    ck, ds, emb, manifest = _context(args.checkpoint, args.dataset, args.split)
    ids = _case_ids(args)
    unknown = [i for i in ids if i not in set(emb.ids)]
    if unknown:
        raise LookupError(f"unknown case id(s): {', '.join(unknown[:5])}")
    train_part = emb.select(manifest["train_ids"])
    thr = fit_thresholds(predict_scores(ck.params, train_part), train_part.labels)
    agents = ck.meta.get("agent_names", list(ds.partition_names))
    reports = [attribution_report(ck.params, emb.select([cid]), thr,
                                  ck.shapley if ck.params.n_agents else None,
                                  ds.class_names, agents) for cid in ids]
    out = Path(args.out or Path(args.checkpoint).parent)
    _write_json(out / "attributions.json", _jsonable([r.to_json() for r in reports]))
    text = "\n\n".join(render_report(r, top=args.top) for r in reports) + "\n"
    (out / "attributions.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_shapley_audit(args, cp) -> int:
    ck, ds, emb, manifest = _context(args.checkpoint, args.dataset, args.split)
    part = emb if args.subset == "all" else emb.select(manifest[f"{args.subset}_ids"])
    if ck.params.n_agents == 0:
        raise ConfigurationError("centralized checkpoint has no agents to audit")
    game = CoalitionGame.from_data(ck.params, part)
    budget = args.budget
    phi_mc = shapley_mc(game, budget, stream(ck.config.seed, STREAM_AUDIT))
    r, A, b = rewards_and_advantage(game)
    doc: dict[str, Any] = {
        "checkpoint": str(args.checkpoint), "subset": args.subset, "n_cases": len(part),
        "agent_names": ck.meta.get("agent_names", list(ds.partition_names)),
        "class_names": list(ds.class_names), "mc_budget": budget,
        "phi_mc": phi_mc.tolist(), "phi_ema": None if ck.shapley.phi_ema is None
        else ck.shapley.phi_ema.tolist(),
        "rewards": r.tolist(), "advantage": A.tolist(), "baseline": b.tolist(),
        "W": ck.params.W.tolist(),
    }
    if args.exact:
        ex = shapley_exact(game_table(game))
        gap = np.abs(phi_mc - ex.rectified)
        N = ck.params.n_agents
        doc.update(
            phi_exact=ex.phi.tolist(), phi_exact_rectified_raw=ex.rectified_raw.tolist(),
            phi_exact_rectified=ex.rectified.tolist(), gap_mc_exact=gap.tolist(),
            max_abs_gap=float(gap.max()),
            efficiency_residual=float(np.max(np.abs(
                ex.phi.sum(axis=0) - (game.value(0) - game.value(game.full))))),
            symmetric_pairs=[[i, j] for i in range(N) for j in range(i + 1, N)
                             if np.array_equal(ex.phi[i], ex.phi[j])],
            zero_rows=[i for i in range(N) if not np.any(ex.phi[i])
                       and not np.any(ex.rectified_raw[i])])
    out = Path(args.out or Path(args.checkpoint).parent) / "shapley_audit.json"
    _write_json(out, doc)
    msg = f"audit of {len(part)} cases, M={budget}"
    if args.exact:
        msg += f"; max |phi_mc - phi_exact| = {doc['max_abs_gap']:.4g}"
    print(f"{msg} -> {out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--out", help="output directory")
    seeds = common.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int)
    seeds.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="credmix", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a planted-signal dataset")
    s.add_argument("--n-cases", type=int, default=200)
    s.add_argument("--agents", type=int, default=5)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--strength", type=float, default=2.0, help="planted signal strength")
    s.add_argument("--noise-std", type=float, default=0.5)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="split, embed, and train per seed")
    t.add_argument("--dataset")
    t.add_argument("--train-fraction", type=float)
    t.add_argument("--provider", choices=["stub", "remote"])
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--cache-dir")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lambda-pg", type=float)
    t.add_argument("--lambda-shap", type=float)
    t.add_argument("--ema-beta", type=float)
    t.add_argument("--mc-budget", type=int)
    t.add_argument("--shapley-interval", type=int)
    t.add_argument("--ablation", choices=list(_ABLATIONS))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="metrics over seed checkpoints")
    e.add_argument("checkpoints", nargs="+")
    e.add_argument("--dataset")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attribute", parents=[common], help="per-case attribution reports")
    a.add_argument("checkpoint")
    a.add_argument("--case", action="append", help="case id (repeatable)")
    a.add_argument("--cases-file", help="file with one case id per line")
    a.add_argument("--dataset")
    a.add_argument("--split")
    a.add_argument("--top", type=int, default=2)
    a.set_defaults(func=cmd_attribute)

    h = sub.add_parser("shapley-audit", parents=[common],
                       help="compare sampled, exact, and advantage credit")
    h.add_argument("checkpoint")
    h.add_argument("--dataset")
    h.add_argument("--split")
    h.add_argument("--subset", choices=["all", "train", "test"], default="all")
    h.add_argument("--exact", action="store_true")
    h.add_argument("--budget", type=int, default=AUDIT_BUDGET,
                   help="permutations for the sampled estimate")
    h.set_defaults(func=cmd_shapley_audit)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, _read_config(args.config))
    except UsageError as exc:
        print(f"credmix {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (CredmixError, OSError, LookupError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"credmix {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
