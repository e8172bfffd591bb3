"""Command-line entry point: prepare, train, ablate, sweep.

Settings resolve as defaults < ``--config`` file < explicit flags. Every
command writes ``manifest.json`` to its output directory; passing that file
back through ``--config`` reruns the command with identical settings.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from crossdenoise import __version__, landscape, trainer
from crossdenoise.ingest import DataSplit, InteractionDataset, ParseError, binarize, parse_ratings, split, synth_generate
from crossdenoise.models import save_model
from crossdenoise.weighting import STRATEGIES, Components, WeightStrategyConfig

log = logging.getLogger("crossdenoise")

SPLIT_FILES = ("train.tsv", "valid.tsv", "test.tsv")

DEFAULTS = {
    "prepare": {
        "input": None,
        "synthetic": None,
        "delimiter": "\t",
        "threshold": 3.0,
        "ratios": [8, 1, 1],
        "seed": 0,
    },
    "train": {
        "split": None,
        "model": "gmf",
        "weighting": "ecdf",
        "components": "bw,if,uf",
        "alpha": 1.0,
        "beta": 2.0,
        "seeds": [0],
        "epochs": 200,
        "patience": 10,
        "batch_size": 2048,
        "lr": 1e-3,
        "dim": 32,
        "neg_ratio": 1,
        "remember_rate": 0.7,
        "ks": [50, 100],
        "timing": False,
    },
}
DEFAULTS["ablate"] = {
    **{k: v for k, v in DEFAULTS["train"].items() if k not in ("components", "timing")},
    "grid": ["", "bw", "bw,if", "bw,uf", "bw,if,uf"],
}
DEFAULTS["sweep"] = {
    **{k: v for k, v in DEFAULTS["train"].items() if k not in ("alpha", "beta", "timing", "ks")},
    "alphas": [0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
    "betas": [0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
    "seeds": [0, 1, 2],
    "epochs": 40,
    "stencil": False,
    "anchors": [],
    "step": 0.01,
}


class UsageError(Exception):
    pass


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _anchors(text):
    out = []
    for tok in text.split(","):
        if tok.strip():
            a, b = tok.split(":")
            out.append([float(a), float(b)])
    return out


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=S, help="root seed")
    common.add_argument("--config", default=S, help="JSON config or a manifest.json from a previous run")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--workers", type=int, default=S, help="worker processes (env CROSSDENOISE_WORKERS)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="crossdenoise", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"crossdenoise {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prepare", parents=[common], help="parse, binarize and split a ratings file")
    prep.add_argument("--input", default=S, help="ratings file: user, item, rating[, timestamp]")
    prep.add_argument("--synthetic", default=S, help="generate instead: USERS,ITEMS,DIM,NOISE")
    prep.add_argument("--delimiter", default=S, help="column delimiter (default tab)")
    prep.add_argument("--threshold", type=float, default=S, help="ratings <= threshold are false positives")
    prep.add_argument("--ratios", type=_ints, default=S, help="train,valid,test ratios (default 8,1,1)")

    def training_flags(sp, components=True):
        sp.add_argument("--split", default=S, help="directory written by `prepare`")
        sp.add_argument("--model", choices=("gmf", "neumf", "cdae"), default=S)
        sp.add_argument("--weighting", choices=STRATEGIES, default=S)
        if components:
            sp.add_argument("--components", default=S, help="subset of bw,if,uf (empty for none)")
        sp.add_argument("--seeds", type=_ints, default=S, help="comma-separated seeds")
        sp.add_argument("--epochs", type=int, default=S)
        sp.add_argument("--patience", type=int, default=S)
        sp.add_argument("--batch-size", dest="batch_size", type=int, default=S)
        sp.add_argument("--lr", type=float, default=S)
        sp.add_argument("--dim", type=int, default=S)
        sp.add_argument("--neg-ratio", dest="neg_ratio", type=int, default=S)
        sp.add_argument("--remember-rate", dest="remember_rate", type=float, default=S)

    tr = sub.add_parser("train", parents=[common], help="train one configuration over seeds")
    training_flags(tr)
    tr.add_argument("--alpha", type=float, default=S)
    tr.add_argument("--beta", type=float, default=S)
    tr.add_argument("--ks", type=_ints, default=S)
    tr.add_argument("--timing", action="store_true", default=S, help="fill the seconds column of epochs.csv")

    ab = sub.add_parser("ablate", parents=[common], help="base/entity factor ablation table")
    training_flags(ab, components=False)
    ab.add_argument("--alpha", type=float, default=S)
    ab.add_argument("--beta", type=float, default=S)
    ab.add_argument("--ks", type=_ints, default=S)
    ab.add_argument("--grid", type=lambda t: t.split(";"), default=S, help="rows separated by ';', e.g. ';bw;bw,if'")

    sw = sub.add_parser("sweep", parents=[common], help="(alpha, beta) grid or stencil sweep")
    training_flags(sw)
    sw.add_argument("--alphas", type=_floats, default=S)
    sw.add_argument("--betas", type=_floats, default=S)
    sw.add_argument("--stencil", action="store_true", default=S, help="3x3 stencils around --anchors")
    sw.add_argument("--anchors", type=_anchors, default=S, help="alpha:beta pairs, comma-separated")
    sw.add_argument("--step", type=float, default=S, help="stencil step size")
    return p


def resolve(args: argparse.Namespace) -> dict:
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out", "verbose", "workers")}
    if "config" in args:
        with open(args.config) as fh:
            loaded = json.load(fh)
        if "config" in loaded and "command" in loaded:
            if loaded["command"] != cmd:
                raise UsageError(f"manifest is for `{loaded['command']}`, not `{cmd}`")
            loaded = loaded["config"]
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(given)
    return cfg


def train_config(cfg: dict, components=None, **over) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        alpha=float(cfg.get("alpha", 1.0)),
        beta=float(cfg.get("beta", 2.0)),
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        negative_ratio=cfg["neg_ratio"],
        embedding_dim=cfg["dim"],
        max_epochs=cfg["epochs"],
        patience=cfg["patience"],
        model=cfg["model"],
        weighting=WeightStrategyConfig(cfg["weighting"], remember_rate=cfg["remember_rate"]),
        components=components if components is not None else Components.parse(cfg.get("components", "")),
        **over,
    )


def check_training(cfg: dict):
    try:
        if "alpha" in cfg and not 0 <= cfg["alpha"] <= cfg["beta"]:
            raise UsageError(f"need 0 <= alpha <= beta (got alpha={cfg['alpha']}, beta={cfg['beta']})")
        if "components" in cfg:
            Components.parse(cfg["components"])
        for row in cfg.get("grid", []):
            Components.parse(row)
        WeightStrategyConfig(cfg["weighting"], remember_rate=cfg["remember_rate"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.get("split") is None:
        raise UsageError("--split is required")
    if cfg["model"] == "neumf" and cfg["dim"] % 2:
        raise UsageError("NeuMF needs an even --dim")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_text(out: Path, name: str, text: str, artifacts: dict):
    path = out / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")
    artifacts[name] = sha256(path)


def write_manifest(out: Path, cmd: str, cfg: dict, inputs: dict, artifacts: dict):
    manifest = {
        "tool": "crossdenoise",
        "version": __version__,
        "command": cmd,
        "config": cfg,
        "inputs": inputs,
        "artifacts": artifacts,
        "seed_derivation": "numpy SeedSequence([seed, purpose, *extra]); purposes "
        "split=0 init=1 negatives=2 shuffle=3 corruption=4 synth=5",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_split(directory) -> tuple[DataSplit, dict]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"split directory not found: {d}")
    parts, digests = [], {}
    for name in SPLIT_FILES:
        path = d / name
        if not path.exists():
            raise FileNotFoundError(f"missing split file: {path}")
        parts.append(InteractionDataset.from_text(path.read_text(encoding="utf-8")))
        digests[str(path)] = sha256(path)
    valid_all = d / "valid_all.tsv"
    valid_unfiltered = None
    if valid_all.exists():
        valid_unfiltered = InteractionDataset.from_text(valid_all.read_text(encoding="utf-8"))
        digests[str(valid_all)] = sha256(valid_all)
    return DataSplit(parts[0], parts[1], parts[2], -1, None, valid_unfiltered), digests


def cmd_prepare(cfg, out: Path, workers: int):
    inputs = {}
    if cfg["synthetic"]:
        vals = cfg["synthetic"].split(",") if isinstance(cfg["synthetic"], str) else cfg["synthetic"]
        m, n, d, noise = int(vals[0]), int(vals[1]), int(vals[2]), float(vals[3])
        ds = synth_generate(m, n, d, noise, cfg["seed"])
    elif cfg["input"]:
        path = Path(cfg["input"])
        if not path.is_file():
            raise FileNotFoundError(f"input file not found: {path}")
        with open(path, "rb") as fh:
            try:
                ratings = parse_ratings(fh, cfg["delimiter"])
            except ParseError as exc:
                raise ParseError(exc.line_no, f"{path}: {exc}") from None
        if not ratings:
            raise UsageError(f"no ratings in {path}")
        ds = binarize(ratings, cfg["threshold"])
        inputs[str(path)] = sha256(path)
    else:
        raise UsageError("prepare needs --input or --synthetic")
    sp = split(ds, tuple(cfg["ratios"]), cfg["seed"])
    artifacts = {}
    for name, part in zip(SPLIT_FILES, (sp.train, sp.valid, sp.test)):
        write_text(out, name, part.to_text(), artifacts)
    write_text(out, "valid_all.tsv", sp.valid_unfiltered.to_text(), artifacts)
    return inputs, artifacts


def _summary_csv(reports_by_seed, ks) -> str:
    lines = ["metric,K,value"]
    for metric in ("recall", "ndcg"):
        for k in ks:
            lines.append(f"{metric},{k},{float(np.mean([r.mean(metric, k) for r in reports_by_seed]))!r}")
    return "\n".join(lines) + "\n"


def cmd_train(cfg, out: Path, workers: int):
    check_training(cfg)
    sp, inputs = load_split(cfg["split"])
    artifacts, per_seed = {}, {}
    test_reports = []
    for seed in cfg["seeds"]:
        tc = train_config(cfg, seed=seed, eval_ks=tuple(cfg["ks"]))
        log.info("training %s seed %d", tc.model, seed)
        res = trainer.train(sp, tc)
        rep = trainer.evaluate_test(res.model, sp, cfg["ks"])
        test_reports.append(rep)
        sd = out / f"seed_{seed}"
        sd.mkdir(parents=True, exist_ok=True)
        save_model(sd / "model.bin", res.model)
        artifacts[f"seed_{seed}/model.bin"] = sha256(sd / "model.bin")
        write_text(out, f"seed_{seed}/epochs.csv", trainer.epochs_to_csv(res.reports, cfg["timing"]), artifacts)
        write_text(out, f"seed_{seed}/metrics.csv", rep.to_csv(), artifacts)
        per_seed[str(seed)] = {"best_epoch": res.best_epoch, "best_valid": res.best_score, **rep.to_dict()}
    write_text(out, "summary.csv", _summary_csv(test_reports, cfg["ks"]), artifacts)
    write_text(out, "report.json", json.dumps({"seeds": per_seed}, sort_keys=True, indent=1) + "\n", artifacts)
    return inputs, artifacts


def cmd_ablate(cfg, out: Path, workers: int):
    check_training(cfg)
    sp, inputs = load_split(cfg["split"])
    grid = [Components.parse(row) for row in cfg["grid"]]
    base = train_config(cfg, components=Components(False, False, False))
    rows = trainer.ablate(sp, base, grid, cfg["seeds"], tuple(cfg["ks"]))
    artifacts = {}
    write_text(out, "ablation.csv", trainer.ablation_to_csv(rows, tuple(cfg["ks"])), artifacts)
    return inputs, artifacts


def cmd_sweep(cfg, out: Path, workers: int):
    check_training(cfg)
    sp, inputs = load_split(cfg["split"])
    base = train_config(cfg)
    artifacts = {}
    if cfg["stencil"]:
        if not cfg["anchors"]:
            raise UsageError("--stencil needs --anchors")
        try:
            verdicts = landscape.stencil(sp, base, cfg["anchors"], cfg["step"], cfg["seeds"], workers)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        surf = landscape.sweep(sp, base, cfg["alphas"], cfg["betas"], cfg["seeds"], workers)
        write_text(out, "surface.csv", surf.to_csv(), artifacts)
        write_text(out, "surface.svg", landscape.surface_to_svg(surf), artifacts)
        verdicts = landscape.grid_verdicts(surf)
    write_text(out, "verdicts.csv", landscape.verdicts_to_csv(verdicts), artifacts)
    return inputs, artifacts


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "ablate": cmd_ablate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    workers = getattr(args, "workers", None) or int(os.environ.get("CROSSDENOISE_WORKERS", "1"))
    try:
        cfg = resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs, artifacts = COMMANDS[args.command](cfg, out, workers)
        write_manifest(out, args.command, cfg, inputs, artifacts)
    except UsageError as exc:
        parser.error(str(exc))
    except (FileNotFoundError, ParseError) as exc:
        print(f"crossdenoise: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
