"""Command-line front end: gen, train, eval, gradcheck, dump-embed.

Exit codes: 0 success, 1 usage or config error, 2 runtime error, 3 gradcheck failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import TrainConfig, eval_number, load_train_config
from .data import ShiftSpec, VideoSet, generate, read_dataset, write_dataset
from .errors import ABGError, ConfigError, InvalidSpec, IoError, SnapshotMismatch
from .gradcheck import run_gradcheck
from .model import ABGModel
from .trainer import CSV_COLUMNS, evaluate, fit, sample_companions

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3

# flag name -> TrainConfig field
TRAIN_FLAGS = {"seed": "seed", "variant": "variant", "agg": "agg", "alpha": "alpha", "beta": "beta",
               "gamma": "gamma", "lambda": "lam", "epochs": "epochs", "bs": "bs", "bt": "bt", "lr": "lr",
               "semi_ratio": "semi_ratio"}
GEN_SIZES = {"n_source": 512, "n_target": 512, "n_test": 0, "n_classes": 4, "K": 5, "D": 32, "seed": 0}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors here map to exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def artifact_version() -> str:
    try:
        sha = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"{__version__}+g{sha}" if sha else __version__


def sha256(path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _load(path) -> VideoSet:
    try:
        return read_dataset(path)
    except OSError as exc:
        raise IoError(f"cannot read dataset {path}: {exc.strerror}") from exc


def _out_dir(path, create: bool) -> Path:
    out = Path(path)
    if create:
        try:
            out.mkdir(exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create output directory {out}: {exc.strerror}") from exc
    if not out.is_dir():
        raise IoError(f"output directory {out} does not exist")
    return out


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


# -- snapshots -----------------------------------------------------------------

def save_snapshot(path: Path, model: ABGModel) -> None:
    cfg = np.frombuffer(json.dumps(model.cfg.to_dict(), sort_keys=True).encode(), dtype=np.uint8)
    try:
        with open(path, "wb") as fh:
            np.savez(fh, __config__=cfg, **model.store.state())
    except OSError as exc:
        raise IoError(f"cannot write snapshot {path}: {exc.strerror}") from exc


def load_snapshot(path) -> ABGModel:
    try:
        with np.load(path) as z:
            cfg = TrainConfig.from_dict(json.loads(bytes(z["__config__"]).decode()))
            state = {k: z[k] for k in z.files if k != "__config__"}
    except OSError as exc:
        raise IoError(f"cannot read snapshot {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise SnapshotMismatch(f"{path} is not a parameter snapshot: {exc}") from exc
    model = ABGModel(cfg)
    if set(state) != set(model.store.state()):
        raise SnapshotMismatch(f"{path}: stored tensors do not match the configured model")
    model.store.load_state(state)
    return model


def _check_dims(model: ABGModel, *sets: VideoSet) -> None:
    c = model.cfg
    for vs in sets:
        if (vs.K, vs.D, vs.n_classes) != (c.K, c.D, c.n_classes):
            raise SnapshotMismatch(f"snapshot expects K={c.K}, D={c.D}, C={c.n_classes}; "
                                   f"dataset has K={vs.K}, D={vs.D}, C={vs.n_classes}")


# -- commands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    spec, rest = ShiftSpec.from_file(args.config) if args.config else (ShiftSpec(), {})
    sizes = dict(GEN_SIZES)
    for k, v in rest.items():
        if k not in sizes:
            raise ConfigError(f"unknown generator key {k!r}")
        sizes[k] = int(v)
    for k in sizes:
        if getattr(args, k, None) is not None:
            sizes[k] = getattr(args, k)
    if args.rotation is not None:
        spec.rotation = eval_number(args.rotation)
    if args.bias is not None:
        spec.bias = args.bias
    if args.order:
        spec.order = True
    spec.validate()
    out = _out_dir(args.out, create=False)
    n_t = sizes["n_target"] + sizes["n_test"]
    src, tgt = generate(spec, sizes["n_source"], n_t, sizes["n_classes"], sizes["K"], sizes["D"], sizes["seed"])
    files = {"source": src, "target": tgt}
    if sizes["n_test"]:
        files["target"], files["target_test"] = tgt.split(sizes["n_target"])
    lines = []
    for name, vs in files.items():
        path = out / f"{name}.abgd"
        try:
            write_dataset(path, vs)
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc.strerror}") from exc
        meta = {"file": path.name, "role": name, "domain": vs.domain, "N": len(vs), "K": vs.K, "D": vs.D,
                "C": vs.n_classes, "seed": sizes["seed"], "sha256": sha256(path),
                "spec": {k: getattr(spec, k) for k in spec.__dataclass_fields__}}
        lines.append(json.dumps(meta, sort_keys=True))
        print(f"wrote {path} ({len(vs)} videos)")
    _write_text(out / "gen.jsonl", "\n".join(lines) + "\n")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    overrides = {field: getattr(args, flag) for flag, field in TRAIN_FLAGS.items()}
    return load_train_config(args.config, **overrides)


def cmd_train(args) -> int:
    if args.manifest:
        try:
            man = json.loads(Path(args.manifest).read_text())
        except OSError as exc:
            raise IoError(f"cannot read manifest {args.manifest}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest {args.manifest} is not JSON: {exc}") from exc
        cfg = TrainConfig.from_dict(man["config"])
        paths = {role: d["path"] for role, d in man["datasets"].items()}
        for role, d in man["datasets"].items():
            if sha256(d["path"]) != d["sha256"]:
                raise ConfigError(f"{d['path']} changed since the manifest was written")
    else:
        if not (args.source and args.target):
            raise UsageError("train needs --source and --target (or --manifest)")
        cfg = _train_config(args)
        paths = {"source": args.source, "target": args.target}
        if args.target_test:
            paths["target_test"] = args.target_test
    if not args.out:
        raise UsageError("train needs --out")
    sets = {role: _load(p) for role, p in paths.items()}
    for vs in sets.values():
        if (vs.K, vs.D, vs.n_classes) != (cfg.K, cfg.D, cfg.n_classes):
            raise ConfigError(f"config expects K={cfg.K}, D={cfg.D}, C={cfg.n_classes}; "
                              f"dataset has K={vs.K}, D={vs.D}, C={vs.n_classes}")
    out = _out_dir(args.out, create=True)
    manifest = {
        "version": artifact_version(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "datasets": {role: {"path": str(Path(p).resolve()), "sha256": sha256(p)} for role, p in paths.items()},
        "started_utc": _now(),
    }
    _write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    start = time.perf_counter()
    try:
        with open(out / "metrics.csv", "w", newline="") as mf, open(out / "epochs.csv", "w", newline="") as ef:
            mw, ew = csv.writer(mf, lineterminator="\n"), csv.writer(ef, lineterminator="\n")
            mw.writerow(CSV_COLUMNS)
            ew.writerow(["epoch", "target_accuracy", "L_ys", "L_yt", "L_d", "L_ef", "L_ev"])
            model, hist = fit(cfg, sets["source"], sets["target"], sets.get("target_test"),
                              on_step=lambda r: mw.writerow([repr(v) for v in r.row()]),
                              on_epoch=lambda e: (ew.writerow([e.epoch, repr(e.target_accuracy)]
                                                              + [repr(v) for v in e.mean_losses.values()]),
                                                  print(f"epoch {e.epoch}: target accuracy "
                                                        f"{e.target_accuracy:.4f}", flush=True)))
    except OSError as exc:
        raise IoError(f"cannot write metrics in {out}: {exc.strerror}") from exc
    save_snapshot(out / "snapshot.npz", model)
    manifest.update(finished_utc=_now(), seconds=round(time.perf_counter() - start, 3))
    _write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if hist:
        print(f"final target accuracy {hist[-1].target_accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_snapshot(args.snapshot)
    data, comp = _load(args.data), _load(args.companions)
    _check_dims(model, data, comp)
    seed = args.seed if args.seed is not None else model.cfg.seed
    idx = sample_companions(comp, model.cfg.bs, seed)
    res = evaluate(model, data, comp.frames[idx])
    print(f"accuracy {res.accuracy:.6f} on {len(data)} videos")
    if args.out:
        out = _out_dir(args.out, create=True)
        _write_text(out / "confusion.csv", res.confusion_csv())
        _write_text(out / "eval.json", json.dumps({"accuracy": res.accuracy, "n": len(data), "seed": seed,
                                                   "snapshot": str(args.snapshot), "data": str(args.data)},
                                                  sort_keys=True) + "\n")
    return EXIT_OK


def embedding_rows(model: ABGModel, source: VideoSet, target: VideoSet, seed: int) -> list[list[str]]:
    """One row per video: id, domain, label, then the classified representation."""
    c = model.cfg
    comp_s = source.frames[sample_companions(source, c.bs, seed)]
    comp_t = target.frames[sample_companions(target, c.bt, seed)]
    rows = []
    for vs in (source, target):
        for i in range(0, len(vs), c.bt):
            chunk = vs.frames[i:i + c.bt]
            if vs.domain == "source":
                rep, _ = model.embed(chunk, comp_t)
            else:
                _, rep = model.embed(comp_s, chunk)
            for j, vec in enumerate(rep):
                rows.append([str(i + j), vs.domain, str(int(vs.labels[i + j]))] + [repr(float(x)) for x in vec])
    return rows


def cmd_dump_embed(args) -> int:
    model = load_snapshot(args.snapshot)
    src, tgt = _load(args.source), _load(args.target)
    _check_dims(model, src, tgt)
    seed = args.seed if args.seed is not None else model.cfg.seed
    rows = embedding_rows(model, src, tgt, seed)
    width = len(rows[0]) - 3 if rows else model.rep_width
    header = ["video_id", "domain", "label"] + [f"e{k}" for k in range(width)]
    _write_text(Path(args.out), "\n".join("\t".join(r) for r in [header] + rows) + "\n")
    print(f"wrote {len(rows)} embeddings of width {width} to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _train_config(args)
    report = run_gradcheck(cfg, seed=cfg.seed, instances=args.instances, threshold=args.threshold)
    text = report.format()
    print(text)
    if args.out:
        _write_text(Path(args.out), text + "\n")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


# -- parser --------------------------------------------------------------------

def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; desk preset < file < flags")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=("abg", "habg"))
    p.add_argument("--agg", choices=("avg", "lstm", "gru", "trn"))
    for name in ("alpha", "beta", "gamma", "lambda", "lr"):
        p.add_argument(f"--{name}", type=float)
    for name in ("epochs", "bs", "bt"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--semi-ratio", type=float)


def build_parser() -> Parser:
    parser = Parser(prog="abg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"abg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen", help="generate source/target datasets")
    g.add_argument("--config", help="key=value shift spec (may also set n_source, n_target, n_test, K, D, ...)")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-source", type=int)
    g.add_argument("--n-target", type=int)
    g.add_argument("--n-test", type=int, help="extra held-out target videos written to target_test.abgd")
    g.add_argument("--classes", dest="n_classes", type=int)
    g.add_argument("--frames", dest="K", type=int)
    g.add_argument("--dim", dest="D", type=int)
    g.add_argument("--rotation", help="angle in radians, e.g. 1.047 or pi/3")
    g.add_argument("--bias", type=float)
    g.add_argument("--order", action="store_true", help="classes in pairs differ only by frame order")
    g.add_argument("--out", required=True, help="existing output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train and write manifest, metrics and snapshot")
    _train_flags(t)
    t.add_argument("--source")
    t.add_argument("--target")
    t.add_argument("--target-test", help="held-out targets for per-epoch accuracy")
    t.add_argument("--manifest", help="re-run exactly what a previous manifest describes")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and confusion matrix of a snapshot")
    e.add_argument("--snapshot", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--companions", required=True, help="source set the companion batch is drawn from")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference audit of ops and per-group objectives")
    _train_flags(c)
    c.add_argument("--threshold", type=float, default=1e-4)
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dump-embed", help="TSV of per-video representations")
    d.add_argument("--snapshot", required=True)
    d.add_argument("--source", required=True)
    d.add_argument("--target", required=True)
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_embed)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, InvalidSpec) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ABGError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
