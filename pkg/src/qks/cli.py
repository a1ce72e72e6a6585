"""``qks`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import plotting
from .config import config_hash, load_config, section
from .dataset_io import (ManifestError, QtfError, SyntheticConfig, generate_synthetic,
                         load_manifest, load_split)
from .model import ModelConfig, QksHead, gradient_check
from .training import CheckpointError, TrainSettings, load_checkpoint, model_config_for, train

log = logging.getLogger("qks")

EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 1, 2, 3

GRADCHECK_DIMS = {
    "small": dict(m=4, L=2, d=8, heads=2, C=8, H=3, W=3),
    "tiny": dict(m=2, L=1, d=4, heads=1, C=4, H=2, W=2),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_config(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        return load_config(args.config, overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _model_config(cfg, manifest) -> ModelConfig:
    return model_config_for(manifest, **{k: v for k, v in section(cfg, "model").items()})


def _head_from_checkpoint(args, cfg, manifest) -> QksHead:
    expected = None
    if args.config is not None or any(s.startswith("model.") for s in (args.set or [])):
        expected = config_hash(_model_config(cfg, manifest).to_dict())
    ck = load_checkpoint(args.checkpoint, expected_hash=expected)
    head = ck.head()
    ev.check_compatible(head, manifest)
    return head


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args, cfg):
    syn = SyntheticConfig.from_dict(dict(section(cfg, "synth"), seed=cfg["seed"]))
    man = generate_synthetic(syn, args.out)
    print(f"wrote {man.root / 'manifest.json'} ({len(man.images('train'))} train, "
          f"{len(man.images('test'))} test images)")


def cmd_train(args, cfg):
    man = load_manifest(args.data)
    if args.loss:
        cfg["train.loss"] = args.loss
    if args.steps is not None:
        cfg["train.steps"] = args.steps
    settings = TrainSettings.from_dict(section(cfg, "train"))
    mcfg = _model_config(cfg, man)
    out = Path(args.out)
    res = train(man, mcfg, settings, seed=cfg["seed"], out_dir=out,
                extra_meta={"run_config": cfg, "run_config_hash": config_hash(cfg)})
    plotting.plot_loss(res.log, out / "loss.png")
    last = res.log[-1][2] if res.log else float("nan")
    print(f"trained {settings.steps} steps in {res.seconds:.1f}s; final batch loss {last:.5f}")
    print(f"checkpoint: {res.checkpoint}")


def cmd_eval(args, cfg):
    man = load_manifest(args.data)
    head = _head_from_checkpoint(args, cfg, man)
    test = load_split(man, "test")
    table = man.label_table()
    preds = ev.predict(head, test.features, table)
    tasks = ["zsl", "gzsl"] if args.task == "both" else [args.task]
    reports = [ev.evaluate(head, man, t, tuple(cfg["eval.ks"]), data=test, table=table,
                           preds=preds) for t in tasks]
    for r in reports:
        print(r.table())
    if args.out:
        payload = [r.to_dict() for r in reports]
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(payload if len(payload) > 1 else payload[0],
                                             indent=1, sort_keys=True) + "\n")


def cmd_gradcheck(args, cfg):
    dims = dict(GRADCHECK_DIMS[args.dims], norm_mode=args.norm_mode)
    mcfg = ModelConfig(**dims)
    t0 = time.perf_counter()
    report = gradient_check(mcfg, cfg["seed"], args.loss, h=args.h, tol=args.tol,
                            query_std=args.query_std)
    worst = max(r.max_rel_err for r in report.values())
    for name, r in report.items():
        flag = "ok  " if r.passed else "FAIL"
        print(f"{flag} {name:28s} max rel err {r.max_rel_err:.3e}")
    ok = all(r.passed for r in report.values())
    print(f"max rel err {worst:.3e} (tol {args.tol:g}) over {len(report)} tensors "
          f"in {time.perf_counter() - t0:.1f}s: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else EXIT_VERIFY


def _resolve_image(man, split, key):
    images = man.images(split)
    for i, img in enumerate(images):
        if img["id"] == key:
            return i
    try:
        i = int(key)
    except ValueError:
        raise UsageError(f"no image {key!r} in split {split}") from None
    if not 0 <= i < len(images):
        raise UsageError(f"image index {i} out of range")
    return i


def _resolve_label(man, key):
    names = man.data["label_names"]
    if key in names:
        return names.index(key)
    try:
        i = int(key)
    except ValueError:
        raise UsageError(f"unknown label {key!r}") from None
    if not 0 <= i < len(names):
        raise UsageError(f"label index {i} out of range")
    return i


def cmd_export_attn(args, cfg):
    man = load_manifest(args.data)
    head = _head_from_checkpoint(args, cfg, man)
    data = load_split(man, args.split)
    idx = _resolve_image(man, args.split, args.image)
    lab = _resolve_label(man, args.label)
    table = man.label_table()
    grid = ev.export_attention_map(head, data.features[idx], table, lab, out_prefix=args.out)
    name = man.data["label_names"][lab]
    plotting.plot_attention(grid, Path(args.out).with_suffix(".png"),
                            title=f"{data.ids[idx]}: {name}")
    print(f"wrote {Path(args.out).with_suffix('.csv')} and raster for {data.ids[idx]} / {name}")


def cmd_stats(args, cfg):
    man = load_manifest(args.data)
    head = _head_from_checkpoint(args, cfg, man)
    stats = ev.token_preference_stats(head, man, args.task)
    out = Path(args.out)
    names = man.data["label_names"]
    stats.write_csv(out, names)
    plotting.plot_preference_matrix(stats, out.with_name(out.stem + "_matrix.png"), names)
    plotting.plot_token_histogram(stats, out.with_name(out.stem + "_tokens.png"))
    conc = stats.concentration()
    conc = conc[~np.isnan(conc)]
    print(f"{len(stats.labels)} labels; {np.mean(conc >= 0.5) * 100:.1f}% put >= 50% of their "
          f"positives on one token; {int((stats.histogram > 0).sum())}/{head.cfg.m} tokens used")


SWEEP_COLUMNS = ("m", "L", "mAP", "F1@3", "F1@5", "AVG")


def sweep_point(man, cfg, m, L, seed, task, data=None, test=None, table=None):
    mcfg = _model_config(dict(cfg, **{"model.m": m, "model.L": L}), man)
    settings = TrainSettings.from_dict(dict(section(cfg, "train"), checkpoint_every=0))
    res = train(man, mcfg, settings, seed=seed, data=data, table=table)
    rep = ev.evaluate(res.head, man, task, (3, 5), data=test, table=table)
    f3, f5 = rep.prf[3]["F1"], rep.prf[5]["F1"]
    return {"m": m, "L": L, "mAP": rep.mAP, "F1@3": f3, "F1@5": f5,
            "AVG": (rep.mAP + f3 + f5) / 3.0}


def cmd_sweep(args, cfg):
    man = load_manifest(args.data)
    ms = _int_list(args.m) if args.m else list(cfg["sweep.m"])
    Ls = _int_list(args.L) if args.L else list(cfg["sweep.L"])
    if args.steps is not None:
        cfg["train.steps"] = args.steps
    data, test, table = load_split(man, "train"), load_split(man, "test"), man.label_table()
    rows = []
    grid = [(m, L) for m in ms for L in Ls]
    for i, (m, L) in enumerate(grid):
        row = sweep_point(man, cfg, m, L, cfg["seed"] + i, args.task, data, test, table)
        log.info("sweep m=%d L=%d AVG=%.4f", m, L, row["AVG"])
        rows.append(row)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    plotting.plot_sweep(rows, out / "sweep.png")
    best = max(rows, key=lambda r: r["AVG"])
    print(f"{len(rows)} grid points; best AVG {best['AVG']:.4f} at m={best['m']} L={best['L']}")


def _int_list(text):
    out = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config with dotted keys")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="single source of randomness")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="qks", description="Query-based knowledge sharing head for "
                "open-vocabulary multi-label classification on precomputed features.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a head")
    t.add_argument("--data", required=True, help="dataset directory or manifest.json")
    t.add_argument("--out", required=True)
    t.add_argument("--loss", choices=("classification", "ranking"))
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="ZSL/GZSL metrics")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", choices=("zsl", "gzsl", "both"), default="both")
    e.add_argument("--out", help="write the report as JSON")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    c.add_argument("--dims", choices=sorted(GRADCHECK_DIMS), default="small")
    c.add_argument("--norm-mode", choices=("prenorm", "literal"), default="prenorm")
    c.add_argument("--loss", choices=("classification", "ranking"), default="classification")
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--query-std", type=float, default=1.0,
                   help="std of query_init/query_pos at the checked point (default 1.0)")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("export-attn", parents=[common], help="attention map for one label")
    a.add_argument("--data", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--image", required=True, help="image id or index")
    a.add_argument("--label", required=True, help="label name or index")
    a.add_argument("--split", default="test")
    a.add_argument("--out", required=True, help="output prefix")
    a.set_defaults(func=cmd_export_attn)

    s = sub.add_parser("stats", parents=[common], help="token preference statistics")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--task", choices=("zsl", "gzsl"), default="zsl")
    s.add_argument("--out", required=True, help="CSV path")
    s.set_defaults(func=cmd_stats)

    w = sub.add_parser("sweep", parents=[common], help="grid over m and L")
    w.add_argument("--data", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--m", help="e.g. 1-24 or 1,4,12")
    w.add_argument("--L", help="e.g. 1-10")
    w.add_argument("--task", choices=("zsl", "gzsl"), default="zsl")
    w.add_argument("--steps", type=int)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        rc = args.func(args, cfg)
    except UsageError as exc:
        print(f"qks: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, QtfError, ManifestError, CheckpointError, ValueError) as exc:
        print(f"qks: {exc}", file=sys.stderr)
        return EXIT_DATA
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
