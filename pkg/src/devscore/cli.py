"""Command-line shell: synth, train, score, eval, explain.

Every run resolves its configuration, writes a manifest.json into the
output directory before any artifact, then produces its outputs.  Report
paths render matplotlib figures next to the delimited files.  Re-running
with the same --seed reproduces every artifact byte for byte, and
`devscore --manifest <path>` replays a recorded run.

Exit codes: 0 success, 1 usage, 2 data or contract error, 3 numeric
divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bags import check_dims
from .data import (SplitSpec, TextureGenConfig, gen_tabular, make_split,
                   standard_tabular_config, texture_bags)
from .errors import (ConfigError, ContractError, DevscoreError, NumericError,
                     ParseError, TrainingDiverged)
from .explain import default_sigma, explain_bag, pixel_auc
from .fileio import (export_saliency_pgm, load_bags, load_checkpoint,
                     prior_from_header, save_bags, save_checkpoint,
                     save_history_csv)
from .losses import MilConfig
from .metrics import auc_f1_curve, evaluate, estimate_open_space_risk, score_to_probability
from .prior import PriorConfig
from .training import TrainConfig, bag_scores, train

ENV_OUT = "DEVSCORE_OUT"


class UsageError(DevscoreError):
    """Bad command line; exits 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---- manifests -----------------------------------------------------------------


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace) -> tuple[Path, dict, float]:
    """Record the resolved run before any artifact exists."""
    stored = {k: (str(v) if isinstance(v, Path) else v)
              for k, v in vars(args).items() if k not in ("func", "command", "manifest")}
    manifest = {
        "tool": "devscore",
        "version": __version__,
        "command": command,
        "started_utc": datetime.now(timezone.utc).isoformat(),
        "args": stored,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path, manifest, time.monotonic()


def _finish_manifest(path: Path, manifest: dict, t0: float) -> None:
    manifest["wall_clock_s"] = round(time.monotonic() - t0, 3)
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _resolve_out(args, command: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    base = os.environ.get(ENV_OUT)
    return Path(base) / command if base else Path(f"devscore_{command}")


# ---- synth ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _resolve_out(args, "synth")
    mpath, manifest, t0 = _write_manifest(out, "synth", args)
    if args.kind == "tabular":
        cfg = standard_tabular_config(seed=args.seed, n_normal=args.n_normal,
                                      anomaly_count=args.anomaly_count, dim=args.dim)
        bags = gen_tabular(cfg)
    else:
        cfg = TextureGenConfig(image_size=args.image_size, n_normal=args.n_normal,
                               n_per_defect=args.n_per_defect, noise_std=args.noise_std,
                               patch=args.patch, stride=args.stride, seed=args.seed)
        bags = texture_bags(cfg)
    spec = SplitSpec(mode=args.mode, n_labeled=args.n_labeled, seen_class=args.seen_class,
                     contamination=args.contamination,
                     test_normal_fraction=args.test_normal_fraction,
                     seed=args.seed if args.split_seed is None else args.split_seed,
                     allow_high_contamination=args.allow_high_contamination)
    split = make_split(bags, spec)
    save_bags(split.x_n, out / "train_normal.jsonl")
    save_bags(split.x_a, out / "train_anomaly.jsonl")
    save_bags(split.test, out / "test.jsonl")
    print(f"synth: {len(split.x_n)} train normals, {len(split.x_a)} labeled anomalies, "
          f"{len(split.test)} test bags -> {out}")
    _finish_manifest(mpath, manifest, t0)
    return 0


# ---- train ---------------------------------------------------------------------

_TRAIN_KEYS = ("hidden", "epochs", "iters_per_epoch", "batch_size", "lr",
               "weight_decay", "beta1", "beta2", "eps", "loss", "focal_gamma",
               "focal_alpha", "k_fraction", "margin", "prior_mu", "prior_sigma",
               "prior_draws", "seed")


def _parse_hidden(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    try:
        return tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"cannot parse hidden widths from {text!r}") from None


def _train_config(args) -> TrainConfig:
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ParseError(f"{args.config}: {err}") from None
        unknown = set(file_cfg) - set(_TRAIN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}; "
                              f"allowed: {sorted(_TRAIN_KEYS)}")

    def pick(key):
        flag = getattr(args, key)
        return flag if flag is not None else file_cfg.get(key)

    kw = {}
    for key in ("epochs", "iters_per_epoch", "batch_size", "lr", "weight_decay",
                "beta1", "beta2", "eps", "loss", "focal_gamma", "focal_alpha", "seed"):
        v = pick(key)
        if v is not None:
            kw[key] = v
    hidden = pick("hidden")
    if hidden is not None:
        kw["hidden"] = _parse_hidden(hidden)
    mil_kw = {}
    if pick("k_fraction") is not None:
        mil_kw["k_fraction"] = pick("k_fraction")
    if pick("margin") is not None:
        mil_kw["margin"] = pick("margin")
    prior_kw = {}
    if pick("prior_mu") is not None:
        prior_kw["mu"] = pick("prior_mu")
    if pick("prior_sigma") is not None:
        prior_kw["sigma"] = pick("prior_sigma")
    if pick("prior_draws") is not None:
        prior_kw["n_draws"] = pick("prior_draws")
    return TrainConfig(mil=MilConfig(**mil_kw), prior=PriorConfig(**prior_kw), **kw)


def _data_paths(args) -> tuple[Path, Path]:
    if args.train_normal and args.train_anomaly:
        return Path(args.train_normal), Path(args.train_anomaly)
    if args.data:
        d = Path(args.data)
        return d / "train_normal.jsonl", d / "train_anomaly.jsonl"
    raise UsageError("train: pass --data DIR or both --train-normal and --train-anomaly")


def cmd_train(args) -> int:
    out = _resolve_out(args, "train")
    cfg = _train_config(args)
    mpath, manifest, t0 = _write_manifest(out, "train", args)
    pn, pa = _data_paths(args)
    x_n = load_bags(pn)
    x_a = load_bags(pa)
    eval_bags = load_bags(args.eval_data) if args.eval_data else None
    try:
        params, history = train(x_n, x_a, cfg, eval_bags=eval_bags)
    except TrainingDiverged as err:
        if err.last_good is not None:
            save_checkpoint(out / "model.ckpt", err.last_good, cfg.mil.k_fraction,
                            cfg.prior, cfg.seed)
            save_history_csv(out / "history.csv", err.history.losses, err.history.epoch_auc)
            print(f"train: diverged ({err}); last good checkpoint kept at {out / 'model.ckpt'}",
                  file=sys.stderr)
        raise
    save_checkpoint(out / "model.ckpt", params, cfg.mil.k_fraction, cfg.prior, cfg.seed)
    save_history_csv(out / "history.csv", history.losses, history.epoch_auc)
    if not args.no_figures:
        from . import figures
        figures.loss_curve(history.losses, out / "loss_curve.png",
                           history.epoch_auc, cfg.iters_per_epoch)
    final = history.losses[-1] if history.losses else float("nan")
    print(f"train: {len(history.losses)} iterations, final loss {final:.6f} -> {out}")
    if history.epoch_auc:
        print(f"train: held-out AUC {history.epoch_auc[-1]:.4f}")
    _finish_manifest(mpath, manifest, t0)
    return 0


# ---- score / eval --------------------------------------------------------------


def _load_model(args):
    params, header = load_checkpoint(args.checkpoint)
    prior = prior_from_header(header)
    return params, header, prior, float(header["k_fraction"])


def _score_rows(params, prior, k_fraction, bags):
    scores = bag_scores(params, bags, k_fraction)
    rows = []
    for bag, s in zip(bags, scores):
        dev = (s - prior.mu) / prior.sigma
        rows.append((bag.id, float(s), float(dev), score_to_probability(s, prior)))
    return scores, rows


def _write_scores_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,score,deviation,probability\n")
        for bag_id, s, dev, prob in rows:
            fh.write(f"{bag_id},{s!r},{dev!r},{prob!r}\n")


def cmd_score(args) -> int:
    out = _resolve_out(args, "score")
    mpath, manifest, t0 = _write_manifest(out, "score", args)
    params, _, prior, k_fraction = _load_model(args)
    bags = load_bags(args.data)
    check_dims(bags)
    _, rows = _score_rows(params, prior, k_fraction, bags)
    _write_scores_csv(out / "scores.csv", rows)
    print(f"score: {len(rows)} bags -> {out / 'scores.csv'}")
    _finish_manifest(mpath, manifest, t0)
    return 0


def cmd_eval(args) -> int:
    out = _resolve_out(args, "eval")
    mpath, manifest, t0 = _write_manifest(out, "eval", args)
    params, _, prior, k_fraction = _load_model(args)
    bags = load_bags(args.data)
    check_dims(bags)
    scores, rows = _score_rows(params, prior, k_fraction, bags)
    labels = np.array([b.y for b in bags])
    risk = None
    if args.risk_normals:
        normals = load_bags(args.risk_normals)
        x_n = np.concatenate([b.instances for b in normals])
        span = x_n.max(axis=0) - x_n.min(axis=0)
        lo = x_n.min(axis=0) - args.risk_pad * span
        hi = x_n.max(axis=0) + args.risk_pad * span
        risk = estimate_open_space_risk(params, prior, x_n, (lo, hi),
                                        n_samples=args.risk_samples,
                                        rng=np.random.default_rng(args.seed))
    report = evaluate(scores, labels, risk=risk)
    _write_scores_csv(out / "scores.csv", rows)
    with open(out / "f1_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("threshold,precision,recall,f1\n")
        for t, p, r, f1 in report.f1_curve:
            fh.write(f"{t!r},{p!r},{r!r},{f1!r}\n")
    best_t, best_f1 = report.best_f1
    lines = [
        f"bags {len(bags)} (anomalies {report.n_pos}, normals {report.n_neg})",
        f"auc {report.auc!r}",
        f"best_f1 {best_f1!r} at threshold {best_t!r}",
    ]
    if risk is not None:
        lines.append(f"open_space_risk {risk.risk!r} (frac_normal {risk.frac_normal!r}, "
                     f"radius {risk.radius!r}, samples {risk.n_samples})")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if not args.no_figures:
        from . import figures
        figures.roc_figure(scores, labels, report.auc, out / "roc_curve.png")
        figures.f1_figure(report.f1_curve, out / "f1_curve.png")
    for line in lines:
        print(f"eval: {line}")
    _finish_manifest(mpath, manifest, t0)
    return 0


# ---- explain -------------------------------------------------------------------


def cmd_explain(args) -> int:
    out = _resolve_out(args, "explain")
    mpath, manifest, t0 = _write_manifest(out, "explain", args)
    params, _, prior, k_fraction = _load_model(args)
    bags = load_bags(args.data)
    if args.image_id:
        targets = [b for b in bags if b.id == args.image_id]
        if not targets:
            raise ContractError(f"no bag with id {args.image_id!r} in {args.data}")
    else:
        targets = [b for b in bags if b.y == 1 and b.geometry is not None]
        if not targets:
            raise ContractError(f"{args.data}: no anomaly bags with patch geometry")
    sigma = args.sigma
    summary = []
    for bag in targets:
        sal = explain_bag(bag, params, k_fraction, sigma)
        export_saliency_pgm(out / f"saliency_{bag.id}.pgm", sal.values)
        phi = float(bag_scores(params, [bag], k_fraction)[0])
        dev = (phi - prior.mu) / prior.sigma
        p_auc = pixel_auc(sal, bag.mask) if bag.mask is not None and bag.mask.any() else None
        if not args.no_figures:
            from . import figures
            title = f"{bag.id}  dev={dev:.2f}" + (f"  pixel AUC={p_auc:.3f}" if p_auc else "")
            figures.saliency_figure(sal.values, out / f"saliency_{bag.id}.png",
                                    mask=bag.mask, title=title)
        summary.append((bag.id, phi, dev, p_auc))
        msg = f"explain: {bag.id} dev {dev:.3f}"
        if p_auc is not None:
            msg += f" pixel_auc {p_auc:.4f}"
        print(msg)
    with open(out / "pixel_auc.csv", "w", encoding="utf-8") as fh:
        fh.write("id,score,deviation,pixel_auc\n")
        for bag_id, phi, dev, p_auc in summary:
            fh.write(f"{bag_id},{phi!r},{dev!r},{'' if p_auc is None else repr(p_auc)}\n")
    with_auc = [row for row in summary if row[3] is not None]
    if len(with_auc) >= 2 and not args.image_id:
        # joint detection/localization curve over the whole test set
        all_scores = bag_scores(params, bags, k_fraction)
        labels = np.array([b.y for b in bags])
        pa = {bag_id: p for bag_id, _, _, p in summary}
        per_bag_pa = np.array([pa.get(b.id, np.nan) for b in bags])
        if labels.min() == 0 and labels.max() == 1:
            curve = auc_f1_curve(all_scores, labels, per_bag_pa)
            with open(out / "auc_f1_curve.csv", "w", encoding="utf-8") as fh:
                fh.write("threshold,f1,mean_pixel_auc\n")
                for t, f1, mp in curve:
                    fh.write(f"{t!r},{f1!r},{mp!r}\n")
            if not args.no_figures:
                from . import figures
                figures.auc_f1_figure(curve, out / "auc_f1_curve.png")
            mean_pa = float(np.mean([row[3] for row in with_auc]))
            print(f"explain: mean pixel AUC over {len(with_auc)} masked anomalies {mean_pa:.4f}")
    _finish_manifest(mpath, manifest, t0)
    return 0


# ---- parser / dispatch -----------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="devscore",
                description="Few-shot anomaly scoring with a Gaussian score prior.")
    p.add_argument("--version", action="version", version=f"devscore {__version__}")
    p.add_argument("--manifest", type=Path, default=None,
                   help="replay a recorded run from its manifest.json")
    sub = p.add_subparsers(dest="command")

    sp = sub.add_parser("synth", parents=[], help="generate a synthetic benchmark + split")
    sp.add_argument("--kind", choices=("tabular", "texture"), default="tabular")
    sp.add_argument("--out", type=Path, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-normal", type=int, default=2000)
    sp.add_argument("--dim", type=int, default=8)
    sp.add_argument("--anomaly-count", type=int, default=200,
                    help="tabular: anomalies per class")
    sp.add_argument("--image-size", type=int, default=32)
    sp.add_argument("--n-per-defect", type=int, default=40)
    sp.add_argument("--noise-std", type=float, default=0.05)
    sp.add_argument("--patch", type=int, default=8)
    sp.add_argument("--stride", type=int, default=4)
    sp.add_argument("--mode", choices=("random", "open-set"), default="random")
    sp.add_argument("--n-labeled", type=int, default=10)
    sp.add_argument("--seen-class", type=int, default=None)
    sp.add_argument("--contamination", type=float, default=0.0)
    sp.add_argument("--allow-high-contamination", action="store_true")
    sp.add_argument("--test-normal-fraction", type=float, default=0.25)
    sp.add_argument("--split-seed", type=int, default=None)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train a scorer on a synthesized split")
    tp.add_argument("--data", type=Path, default=None, help="directory from synth")
    tp.add_argument("--train-normal", type=Path, default=None)
    tp.add_argument("--train-anomaly", type=Path, default=None)
    tp.add_argument("--eval-data", type=Path, default=None,
                    help="bags scored for AUC after every epoch")
    tp.add_argument("--out", type=Path, default=None)
    tp.add_argument("--config", type=Path, default=None, help="JSON with config fields")
    tp.add_argument("--loss", choices=("deviation", "focal"), default=None)
    tp.add_argument("--hidden", type=str, default=None, help="comma list, e.g. 64,32")
    tp.add_argument("--epochs", type=int, default=None)
    tp.add_argument("--iters-per-epoch", type=int, default=None)
    tp.add_argument("--batch-size", type=int, default=None)
    tp.add_argument("--lr", type=float, default=None)
    tp.add_argument("--weight-decay", type=float, default=None)
    tp.add_argument("--beta1", type=float, default=None)
    tp.add_argument("--beta2", type=float, default=None)
    tp.add_argument("--eps", type=float, default=None)
    tp.add_argument("--focal-gamma", type=float, default=None)
    tp.add_argument("--focal-alpha", type=float, default=None)
    tp.add_argument("--k-fraction", type=float, default=None)
    tp.add_argument("--margin", type=float, default=None)
    tp.add_argument("--prior-mu", type=float, default=None)
    tp.add_argument("--prior-sigma", type=float, default=None)
    tp.add_argument("--prior-draws", type=int, default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--no-figures", action="store_true")
    tp.set_defaults(func=cmd_train)

    cp = sub.add_parser("score", help="per-bag scores, deviations and tail probabilities")
    cp.add_argument("--checkpoint", type=Path, required=True)
    cp.add_argument("--data", type=Path, required=True)
    cp.add_argument("--out", type=Path, default=None)
    cp.set_defaults(func=cmd_score)

    ep = sub.add_parser("eval", help="detection report with figures")
    ep.add_argument("--checkpoint", type=Path, required=True)
    ep.add_argument("--data", type=Path, required=True)
    ep.add_argument("--out", type=Path, default=None)
    ep.add_argument("--risk-normals", type=Path, default=None,
                    help="train normals for the open-space risk estimate")
    ep.add_argument("--risk-samples", type=int, default=100_000)
    ep.add_argument("--risk-pad", type=float, default=2.0,
                    help="box padding as a multiple of the normal span")
    ep.add_argument("--seed", type=int, default=0)
    ep.add_argument("--no-figures", action="store_true")
    ep.set_defaults(func=cmd_eval)

    xp = sub.add_parser("explain", help="saliency maps for anomaly bags")
    xp.add_argument("--checkpoint", type=Path, required=True)
    xp.add_argument("--data", type=Path, required=True)
    xp.add_argument("--out", type=Path, default=None)
    xp.add_argument("--image-id", type=str, default=None,
                    help="explain one bag instead of every anomaly")
    xp.add_argument("--sigma", type=float, default=None,
                    help="blur width; defaults to 4 scaled by side/128")
    xp.add_argument("--no-figures", action="store_true")
    xp.set_defaults(func=cmd_explain)
    return p


def _replay(manifest_path: Path) -> int:
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ParseError(f"{manifest_path}: {err}") from None
    command = manifest.get("command")
    funcs = {"synth": cmd_synth, "train": cmd_train, "score": cmd_score,
             "eval": cmd_eval, "explain": cmd_explain}
    if command not in funcs:
        raise ParseError(f"{manifest_path}: unknown command {command!r}")
    args = argparse.Namespace(**manifest["args"])
    return funcs[command](args)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.manifest is not None:
            if args.command is not None:
                raise UsageError("--manifest replaces the subcommand; pass one or the other")
            return _replay(args.manifest)
        if args.command is None:
            parser.print_help()
            return 1
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ConfigError, ContractError, ParseError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"error: numeric divergence: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
