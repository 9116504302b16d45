"""``d2rec`` command line.

Commands pass data through files under ``--out`` (default ``run/``)::

    synth     -> run/synth/   ratings.csv social.csv oracle.json
    split     -> run/split/   train.csv test_pool.csv test_pop<N>.csv social_adj.csv dataset.json
    embed     -> run/embed/   theta.bin beta.bin report.json
    train     -> run/train/   model.bin model.bin.json history.csv summary.json
    eval      -> run/eval/    metrics.csv
    ablate    -> run/ablate/  ablation.csv history_<variant>.csv
    gradcheck -> run/gradcheck/result.json

Every command also writes its resolved ``config.json`` next to its outputs.
Exit codes: 0 ok, 1 usage/config/missing input, 2 runtime failure,
3 gradient check failed.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .dataio import (EmptySubsetError, build_dataset, build_exposure_table, load_ratings,
                     load_social, load_split, make_popularity_subset, read_ratings_table,
                     save_split, split_train_test, write_exposure_table)
from .evaluator import RankingProtocol, evaluate, mae_mse, write_reports
from .graph_embed import EmbeddingTable, WalkConfig, item_embeddings, user_embeddings
from .model import D2Rec, Variant, toy_gradient_check
from .synth import SynthConfig, SynthOracle, generate, unbiased_testset, write_synth
from .trainer import TrainConfig, train

log = logging.getLogger("d2rec")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
ITEM_SEED_OFFSET = 17  # item walks use seed + 17 so the two graphs never share a stream


class ConfigFieldError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


class MissingArtifact(FileNotFoundError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}; run `d2rec {producer}` first")
        self.producer = producer


@dataclass
class PathsSection:
    ratings: str | None = None  # external data; default is the synth output
    social: str | None = None
    header: bool = False


@dataclass
class SplitSection:
    train_fraction: float = 0.6
    popularities: list = field(default_factory=lambda: [2, 3, 5, 10])

    def __post_init__(self):
        if not self.popularities or any(not isinstance(n, int) or n < 1 for n in self.popularities):
            raise ValueError("popularities must be a non-empty list of integers >= 1")


@dataclass
class AblateSection:
    variants: list = field(default_factory=lambda: [v.value for v in Variant])
    oracle_n_per_item: int = 5  # unbiased synthetic test set, when an oracle exists

    def __post_init__(self):
        for v in self.variants:
            Variant(v)


@dataclass
class GradcheckSection:
    n_users: int = 6
    n_items: int = 6
    d_emb: int = 8
    d_factor: int = 4
    batch: int = 6
    variant: str = "full"
    h: float = 1e-5
    tolerance: float = 1e-4

    def __post_init__(self):
        Variant(self.variant)


SECTIONS = {"paths": PathsSection, "synth": SynthConfig, "split": SplitSection,
            "embed": WalkConfig, "train": TrainConfig, "eval": RankingProtocol,
            "ablate": AblateSection, "gradcheck": GradcheckSection}
SEEDED = ("synth", "train", "eval")


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitSection = field(default_factory=SplitSection)
    embed: WalkConfig = field(default_factory=WalkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: RankingProtocol = field(default_factory=RankingProtocol)
    ablate: AblateSection = field(default_factory=AblateSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def to_json(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=_json_default))


def _json_default(o):
    if isinstance(o, Enum):
        return o.value
    raise TypeError(type(o).__name__)


def _check_value(value, default, fpath):
    ok = True
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, Enum):
        ok = isinstance(value, str)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, (str, int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif default is None:
        ok = value is None or (isinstance(value, (int, str)) and not isinstance(value, bool))
    if not ok:
        want = type(default).__name__ if default is not None else "null or scalar"
        raise ConfigFieldError(fpath, f"expected {want}, got {type(value).__name__} {value!r}")


def _build_section(name, cls, data):
    path = f"config.{name}"
    if not isinstance(data, dict):
        raise ConfigFieldError(path, "section must be a JSON object")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ConfigFieldError(f"{path}.{key}", "unknown field")
        if key == "seed":
            raise ConfigFieldError(f"{path}.seed", "set the top-level `seed` instead")
        _check_value(value, getattr(defaults, key), f"{path}.{key}")
    try:
        return cls(**data)
    except (ValueError, TypeError) as exc:
        raise ConfigFieldError(path, str(exc)) from None


def load_config(path: str | None, seed: int | None = None) -> RunConfig:
    """Parse and validate a JSON run config; ``seed`` overrides the file's top-level seed."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigFieldError("--config", f"{p} does not exist")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigFieldError("--config", f"invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigFieldError("config", "top level must be a JSON object")
    for key in raw:
        if key != "seed" and key not in SECTIONS:
            raise ConfigFieldError(f"config.{key}", "unknown section")
    if "seed" in raw:
        _check_value(raw["seed"], 0, "config.seed")
    resolved_seed = seed if seed is not None else raw.get("seed", 0)
    kw = {name: _build_section(name, cls, raw.get(name, {})) for name, cls in SECTIONS.items()}
    for name in SEEDED:
        kw[name] = replace(kw[name], seed=resolved_seed)
    if "d_emb" not in raw.get("train", {}):
        kw["train"] = replace(kw["train"], d_emb=kw["embed"].dim)
    elif kw["train"].d_emb != kw["embed"].dim and kw["train"].variant is not Variant.NO_NETWORK_EMBEDDINGS:
        raise ConfigFieldError("config.train.d_emb",
                               f"must equal config.embed.dim ({kw['embed'].dim})")
    return RunConfig(seed=resolved_seed, **kw)


# -- helpers -------------------------------------------------------------------

def _stage_dir(out: Path, name: str, cfg: RunConfig) -> Path:
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n",
                                   encoding="utf-8")
    return d


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, producer)
    return path


def _load_split(out: Path):
    _require(out / "split" / "dataset.json", "split")
    ds, subsets = load_split(out / "split")
    test_pool = read_ratings_table(out / "split" / "test_pool.csv")
    return ds, subsets, test_pool


def _load_embeddings(out: Path, needed: bool):
    th, be = out / "embed" / "theta.bin", out / "embed" / "beta.bin"
    if not needed and not th.exists():
        return None, None
    return EmbeddingTable.load(_require(th, "embed")), EmbeddingTable.load(_require(be, "embed"))


def _seen(ds, test_pool):
    seen = ds.rated_by_user()
    for u, i, _ in test_pool:
        seen[u].add(i)
    return seen


def _synthetic_oracle(out: Path, ds):
    """Oracle for the split's data when it came from ``synth`` with identity ids."""
    p = out / "synth" / "oracle.json"
    if not p.exists():
        return None
    oracle = SynthOracle.from_json(json.loads(p.read_text(encoding="utf-8"))["oracle"])
    if (len(oracle.user_conformity) != ds.n_users or len(oracle.item_popularity) != ds.n_items
            or ds.user_ids[:1] != ["u0"] or ds.item_ids[:1] != ["i0"]):
        return None
    return oracle


# -- commands ------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out: Path) -> int:
    d = _stage_dir(out, "synth", cfg)
    ds, oracle = generate(cfg.synth)
    write_synth(d, ds, oracle, cfg.synth)
    print(f"synth: {ds.n_users} users, {ds.n_items} items, {len(ds.ratings)} ratings -> {d}")
    return EXIT_OK


def cmd_split(cfg: RunConfig, out: Path) -> int:
    if cfg.paths.ratings is not None:
        for name in ("ratings", "social"):
            given = getattr(cfg.paths, name)
            if given is not None and not Path(given).exists():
                raise ConfigFieldError(f"config.paths.{name}", f"no such file {given}")
        ratings = load_ratings(cfg.paths.ratings, cfg.paths.header)
        edges = load_social(cfg.paths.social, cfg.paths.header) if cfg.paths.social else []
        ds = build_dataset(ratings, edges)
    else:
        src = out / "synth"
        ratings = load_ratings(_require(src / "ratings.csv", "synth"))
        edges = load_social(_require(src / "social.csv", "synth"))
        meta = json.loads(_require(src / "oracle.json", "synth").read_text(encoding="utf-8"))
        n_u, n_i = meta["config"]["n_users"], meta["config"]["n_items"]
        ds = build_dataset(ratings, edges, users=[f"u{k}" for k in range(n_u)],
                           items=[f"i{k}" for k in range(n_i)])
    d = _stage_dir(out, "split", cfg)
    tr, te = split_train_test(ds, cfg.split.train_fraction, cfg.seed)
    subsets = {}
    for n in cfg.split.popularities:
        try:
            subsets[n] = make_popularity_subset(te, n, cfg.seed)
        except EmptySubsetError:
            log.warning("split: no item has %d test ratings; popularity %d skipped", n, n)
    save_split(d, ds, tr, te, subsets)
    if tr:
        write_exposure_table(d / "exposure_train.csv",
                             build_exposure_table(tr, ds.n_items,
                                                  cfg.train.negatives_per_positive, cfg.seed))
    print(f"split: {len(tr)} train / {len(te)} test; subsets "
          + ", ".join(f"pop{n}={len(s.rows)}" for n, s in subsets.items()))
    return EXIT_OK


def cmd_embed(cfg: RunConfig, out: Path) -> int:
    ds, _, _ = _load_split(out)
    d = _stage_dir(out, "embed", cfg)
    theta = user_embeddings(ds, cfg.embed, cfg.seed)
    beta = item_embeddings(ds, cfg.embed, cfg.seed + ITEM_SEED_OFFSET)
    theta.save(d / "theta.bin")
    beta.save(d / "beta.bin")
    report = {"n_users": len(theta), "n_items": len(beta), "dim": theta.dim,
              "untrained_items": beta.untrained}
    (d / "report.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    print(f"embed: theta {theta.vectors.shape}, beta {beta.vectors.shape}, "
          f"{len(beta.untrained)} items without interactions")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    ds, _, _ = _load_split(out)
    theta, beta = _load_embeddings(out, cfg.train.variant is not Variant.NO_NETWORK_EMBEDDINGS)
    d = _stage_dir(out, "train", cfg)
    model, hist = train(ds, theta, beta, cfg.train)
    model.save(d / "model.bin")
    hist.to_csv(d / "history.csv")
    summary = {"variant": cfg.train.variant.value, "epochs": len(hist.records),
               "best_epoch": hist.best_epoch, "stopped_early": hist.stopped_early,
               "initial_train_mse": hist.initial.train_mse if hist.initial else None,
               "best_train_mse": min(hist.train_mse()) if hist.records else None}
    (d / "summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    print(f"train: {summary['epochs']} epochs, best {summary['best_epoch']}, "
          f"train mse {summary['best_train_mse']}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    ds, subsets, test_pool = _load_split(out)
    ckpt = _require(out / "train" / "model.bin", "train")
    meta = json.loads(_require(Path(str(ckpt) + ".json"), "train").read_text(encoding="utf-8"))
    theta, beta = _load_embeddings(out, meta["variant"] != Variant.NO_NETWORK_EMBEDDINGS.value)
    model = D2Rec.load(ckpt, None if theta is None else theta.vectors,
                       None if beta is None else beta.vectors)
    if not subsets:
        raise EmptySubsetError("split produced no popularity subsets")
    d = _stage_dir(out, "eval", cfg)
    seen = _seen(ds, test_pool)
    reports = [evaluate(model, subsets[n], cfg.eval, ds.n_items, seen) for n in sorted(subsets)]
    write_reports(d / "metrics.csv", reports)
    for r in reports:
        print(f"eval pop{r.subset_popularity}: mae {r.mae:.4f} mse {r.mse:.4f} "
              f"hr@{r.k} {r.hr_at_k:.4f} ndcg@{r.k} {r.ndcg_at_k:.4f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    ds, subsets, _ = _load_split(out)
    variants = [Variant(v) for v in cfg.ablate.variants]
    theta, beta = _load_embeddings(out, any(v is not Variant.NO_NETWORK_EMBEDDINGS for v in variants))
    d = _stage_dir(out, "ablate", cfg)
    groups = [(str(n), subsets[n].rows) for n in sorted(subsets)]
    oracle = _synthetic_oracle(out, ds)
    if oracle is not None:
        groups.append(("oracle", unbiased_testset(oracle, cfg.ablate.oracle_n_per_item,
                                                  cfg.seed, exclude=ds).rows))
    header = ["variant"] + [f"{m}@{g}" for g, _ in groups for m in ("mae", "mse")]
    rows = []
    for v in variants:
        model, hist = train(ds, theta, beta, replace(cfg.train, variant=v))
        hist.to_csv(d / f"history_{v.value}.csv")
        row = [v.value]
        for _, test in groups:
            u, i, y = (np.array(col) for col in zip(*test))
            mae, mse = mae_mse(y, model.predict(u, i))
            row += [f"{mae:.6f}", f"{mse:.6f}"]
        rows.append(row)
        print("ablate " + " ".join(f"{h}={x}" for h, x in zip(header, row)))
    with open(d / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    g = cfg.gradcheck
    res = toy_gradient_check(g.n_users, g.n_items, g.d_emb, g.d_factor, g.batch,
                             Variant(g.variant), cfg.seed, g.h, g.tolerance)
    d = _stage_dir(out, "gradcheck", cfg)
    result = {"max_rel_error": float(res.max_rel_error), "tolerance": g.tolerance,
              "passed": bool(res.passed), "worst": None if res.worst is None else list(res.worst),
              "message": res.message}
    (d / "result.json").write_text(json.dumps(result, indent=1) + "\n", encoding="utf-8")
    status = "PASS" if res.passed else "FAIL"
    print(f"gradcheck: max relative error {res.max_rel_error:.3e} "
          f"(tolerance {g.tolerance:g}) {status}")
    return EXIT_OK if res.passed else EXIT_VERIFY


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "embed": cmd_embed, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


HELP = {
    "synth": "generate a confounded synthetic dataset with its oracle",
    "split": "60/40 split plus fixed-popularity test subsets",
    "embed": "node2vec embeddings for users and items",
    "train": "fit one model variant with early stopping",
    "eval": "rating and ranking metrics per test subset",
    "ablate": "train and score every variant side by side",
    "gradcheck": "finite-difference check of the analytic gradients",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="d2rec", description="Causal disentanglement recommender pipeline.",
                     epilog=__doc__.split("\n\n", 1)[1], formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="JSON run config with per-command sections")
        p.add_argument("--seed", type=int, help="overrides the config's top-level seed")
        p.add_argument("--out", default="run", help="run directory (default: run)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](cfg, Path(args.out))
    except (ConfigFieldError, MissingArtifact) as exc:
        print(f"d2rec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        log.debug("traceback", exc_info=True)
        print(f"d2rec {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
