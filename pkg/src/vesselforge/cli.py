"""Command-line entry point: ``vesselforge <group> <command> [flags]``.

Every command that writes files puts them under ``<out>/<hash>/`` where the
hash covers the effective configuration, so a changed configuration never
lands on top of earlier results. Success prints one JSON line on stdout;
failure prints ``error: {"code": ..., "message": ...}`` on stderr.
"""

import argparse
import hashlib
import json
import os
import sys
from functools import partial
from pathlib import Path

import numpy as np

from vesselforge import config as cfg_mod, nifti, parallel
from vesselforge.config import DrandConfig, FlowConfig

SEED_ENV = "VESSELFORGE_SEED"


class CliError(Exception):
    def __init__(self, code, message, status=1):
        super().__init__(message)
        self.code, self.status = code, status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _error_line("usage", message)
        sys.exit(2)


def _error_line(code, message):
    sys.stderr.write("error: " + json.dumps({"code": code, "message": str(message)}, sort_keys=True) + "\n")


def _ok(**fields):
    print(json.dumps({"status": "ok", **fields}, sort_keys=True))


def resolve_seed(flag, config_seed=0):
    """Flag beats the environment, which beats the configuration file."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise CliError("bad-seed", f"{SEED_ENV}={env!r} is not an integer", 2) from exc
    return int(config_seed)


def _hash_dir(out, payload):
    digest = cfg_mod.config_hash(payload)
    d = Path(out) / digest
    d.mkdir(parents=True, exist_ok=True)
    return d, digest


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _write_json(path, data):
    Path(path).write_text(json.dumps(cfg_mod.to_dict(data), sort_keys=True, indent=2) + "\n")


def _jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------- gen


def _drand_config(args):
    if args.config:
        config = cfg_mod.load_drand_config(args.config)
        if args.size is not None and tuple(config.shape) != (args.size,) * 3:
            raise CliError("config-conflict", "--size disagrees with the configuration shape", 2)
    else:
        config = cfg_mod.default_config(args.size or 128)
    config.seed = resolve_seed(args.seed, config.seed)
    return config.validate()


def _write_mask_sample(config, directory, index):
    from vesselforge import compose

    label = compose.generate_label(config, index)
    nifti.write_volume(Path(directory) / f"{index:06d}_label.nii.gz", label)
    rec = {"seed": config.seed, "stream": index, "config_hash": config.hash(), "class": 0, "kind": "mask"}
    _write_json(Path(directory) / f"{index:06d}.json", rec)
    return rec


def _write_drand_sample(config, directory, index):
    from vesselforge import compose

    image, label, cls, meta = compose.generate_drand_pair(config, index)
    nifti.write_volume(Path(directory) / f"{index:06d}_img.nii.gz", image)
    nifti.write_volume(Path(directory) / f"{index:06d}_label.nii.gz", label)
    _write_json(Path(directory) / f"{index:06d}.json", meta)
    return cfg_mod.to_dict(meta)


def cmd_gen(args):
    config = _drand_config(args)
    if args.count < 0:
        raise CliError("bad-count", "--count must be non-negative", 2)
    d, digest = _hash_dir(args.out, {"kind": args.what, "drand": config})
    cfg_mod.save_document(d / "config.json", config)
    writer = _write_mask_sample if args.what == "masks" else _write_drand_sample
    records = parallel.map_ordered(partial(writer, config, str(d)), range(args.start, args.start + args.count), args.workers)
    _jsonl(d / "metadata.jsonl", records)
    _ok(output=str(d), hash=digest, count=len(records))


# ---------------------------------------------------------------- fm


def cmd_fm_train(args):
    from vesselforge import flow
    from vesselforge.rng import make_rng

    fc = FlowConfig(field_kind=args.field, hidden=args.hidden, steps=args.steps, lr=args.lr, batch_size=args.batch_size)
    seed = resolve_seed(args.seed)
    d, digest = _hash_dir(args.out, {"kind": "fm-train-toy", "flow": fc, "seed": seed, "n": args.n})
    data = flow.toy_dataset(args.n, seed=seed)
    rng = make_rng(seed, 0, 1)
    kwargs = {} if fc.field_kind == "linear" else {"hidden": fc.hidden, "time_dim": fc.time_dim, "n_classes": fc.n_classes}
    field = flow.make_field(fc.field_kind, rng=make_rng(seed, 0, 0), **kwargs)
    try:
        field, trace = flow.train_toy(field, data, fc.steps, fc.lr, rng, fc.batch_size, trace_path=d / "loss.csv")
    except flow.FlowError as exc:
        raise CliError(exc.code, str(exc)) from exc
    flow.save_field(d / "field.vff", field)
    _write_json(d / "config.json", {"flow": fc, "seed": seed, "n": args.n})
    _ok(output=str(d), hash=digest, final_loss=trace[-1] if trace else None)


def cmd_fm_sample(args):
    from vesselforge import flow

    field = flow.load_field(args.field)
    mask, _ = nifti.read_volume(args.mask)
    seed = resolve_seed(args.seed)
    payload = {
        "kind": "fm-sample",
        "field": _file_digest(args.field),
        "mask": _file_digest(args.mask),
        "class": args.cls,
        "steps": args.steps,
        "seed": seed,
        "count": args.count,
    }
    d, digest = _hash_dir(args.out, payload)
    try:
        pairs = flow.generate_dflow(field, [np.asarray(mask).astype(bool)], [args.cls], args.count, args.steps, seed, clip=not args.no_clip)
    except flow.FlowError as exc:
        raise CliError(exc.code, str(exc)) from exc
    records = []
    for i, p in enumerate(pairs):
        nifti.write_volume(d / f"{i:06d}_img.nii.gz", p.image)
        nifti.write_volume(d / f"{i:06d}_label.nii.gz", p.label)
        records.append({"seed": seed, "stream": i, "config_hash": digest, "class": p.cls, "tilde": True, "steps": args.steps})
    _jsonl(d / "metadata.jsonl", records)
    _ok(output=str(d), hash=digest, count=len(records))


# ---------------------------------------------------------------- metrics


def cmd_metrics(args):
    from vesselforge import metrics

    pred, _ = nifti.read_volume(args.pred)
    gt, _ = nifti.read_volume(args.gt)
    pred, gt = np.asarray(pred) > 0, np.asarray(gt) > 0
    if args.which == "dice":
        print(repr(float(metrics.dice(pred, gt))))
    else:
        print(repr(float(metrics.cldice(pred, gt))))


# ---------------------------------------------------------------- preprocess


def _triple(text, cast=float):
    parts = [cast(p) for p in str(text).split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise CliError("bad-argument", f"expected one or three comma-separated values, got {text!r}", 2)
    return tuple(parts)


def cmd_preprocess(args):
    from vesselforge import preprocess as pp

    v, meta = nifti.read_volume(args.input)
    params = {k: val for k, val in vars(args).items() if k not in ("func", "out", "input")}
    params["input"] = _file_digest(args.input)
    d, digest = _hash_dir(args.out, {"kind": "preprocess", **params})
    spacing = meta["spacing"]
    name = Path(args.input).name
    op = args.op
    if op == "clip":
        out = pp.clip_rescale(v, pp.ClipSpec(args.low, args.high))
    elif op == "resample":
        out, spacing = pp.resample_spacing(v, spacing, _triple(args.target_spacing), "nearest" if args.nearest else "trilinear")
    elif op == "smooth-labels":
        out = pp.smooth_labels(v, args.sigma, args.tau)
    elif op == "improve-labels":
        p = pp.LabelImproveParams(args.delta, args.threshold, args.filter_size, args.min_size)
        out = pp.improve_labels_hr(v, p)
    else:
        label = nifti.read_volume(args.label)[0] if args.label else None
        stride = _triple(args.stride, int) if args.stride else None
        patches = pp.extract_patches(v, label, _triple(args.target, int), stride, not args.zero_pad)
        records = []
        for i, (start, img, lab) in enumerate(patches):
            nifti.write_volume(d / f"{i:06d}_img.nii.gz", img, spacing)
            if lab is not None:
                nifti.write_volume(d / f"{i:06d}_label.nii.gz", lab, spacing)
            records.append({"patch": i, "start": list(start), "source": name})
        _jsonl(d / "metadata.jsonl", records)
        _ok(output=str(d), hash=digest, count=len(records))
        return
    target = d / (name if name.endswith((".nii", ".nii.gz")) else name + ".nii.gz")
    nifti.write_volume(target, out, spacing)
    _ok(output=str(target), hash=digest)


# ---------------------------------------------------------------- mix


def cmd_mix(args):
    from vesselforge import sampler

    try:
        weights = sampler.SourceWeights.parse(args.weights)
    except ValueError as exc:
        raise CliError("bad-weights", str(exc), 2) from exc
    registry = sampler.load_manifest(args.manifest)
    drand_config = _drand_config(args) if registry.of_kind("drand") else None
    for e in registry.entries:
        if e.directory:
            load, n = sampler.directory_loader(e.directory)
            if n < e.count:
                raise CliError("manifest", f"{e.directory} holds {n} pairs, manifest says {e.count}")
            e.loader = load
        elif e.kind == "drand":
            e.loader = sampler.drand_loader(drand_config)
        else:
            raise CliError("manifest", f"{e.kind} source needs a directory")
    seed = resolve_seed(args.seed)
    excluded = tuple(int(c) for c in args.exclude.split(",")) if args.exclude else ()
    payload = {
        "kind": "mix",
        "manifest": _file_digest(args.manifest),
        "weights": args.weights,
        "seed": seed,
        "count": args.count,
        "exclude": excluded,
        "suite": args.suite,
        "drand": drand_config,
    }
    d, digest = _hash_dir(args.out, payload)
    spec = sampler.AugmentationSpec(args.suite)
    records = []
    stream = sampler.build_epoch_stream(registry, weights, seed, excluded, spec)
    for _ in range(args.count):
        item = next(stream)
        k = item.position
        nifti.write_volume(d / f"{k:06d}_img.nii.gz", item.image)
        nifti.write_volume(d / f"{k:06d}_label.nii.gz", item.label)
        rec = {"seed": seed, "stream": k, "config_hash": digest, **item.provenance()}
        _write_json(d / f"{k:06d}.json", rec)
        records.append(rec)
    _jsonl(d / "metadata.jsonl", records)
    _ok(output=str(d), hash=digest, count=len(records))


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="vesselforge", description="Synthetic vessel data generation, flow matching and metrics.")
    sub = p.add_subparsers(dest="group", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", help="generate synthetic masks or image/label pairs")
    gen.add_argument("what", choices=("masks", "drand"))
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--start", type=int, default=0, help="first sample index")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--config")
    gen.add_argument("--size", type=int, help="cubic output size when no config file is given")
    gen.add_argument("--out", required=True)
    gen.add_argument("--workers", type=int, default=1)
    gen.set_defaults(func=cmd_gen)

    fm = sub.add_parser("fm", help="toy flow matching")
    fsub = fm.add_subparsers(dest="fm_cmd", required=True, parser_class=_Parser)
    tr = fsub.add_parser("train-toy")
    tr.add_argument("--steps", type=int, default=1500)
    tr.add_argument("--lr", type=float, default=0.05)
    tr.add_argument("--batch-size", type=int, default=4)
    tr.add_argument("--hidden", type=int, default=32)
    tr.add_argument("--field", choices=("mlp", "conv", "linear"), default="mlp")
    tr.add_argument("--n", type=int, default=32, help="toy dataset size")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_fm_train)
    sm = fsub.add_parser("sample")
    sm.add_argument("--field", required=True)
    sm.add_argument("--mask", required=True)
    sm.add_argument("--class", dest="cls", type=int, required=True)
    sm.add_argument("--steps", type=int, default=100)
    sm.add_argument("--count", type=int, default=1)
    sm.add_argument("--seed", type=int)
    sm.add_argument("--no-clip", action="store_true")
    sm.add_argument("--out", required=True)
    sm.set_defaults(func=cmd_fm_sample)

    met = sub.add_parser("metrics", help="segmentation overlap scores")
    met.add_argument("which", choices=("dice", "cldice"))
    met.add_argument("--pred", required=True)
    met.add_argument("--gt", required=True)
    met.set_defaults(func=cmd_metrics)

    pre = sub.add_parser("preprocess", help="dataset conditioning")
    psub = pre.add_subparsers(dest="op", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--in", dest="input", required=True)
    common.add_argument("--out", required=True)
    c = psub.add_parser("clip", parents=[common])
    c.add_argument("--low", type=float, default=0.0)
    c.add_argument("--high", type=float, default=98.0)
    r = psub.add_parser("resample", parents=[common])
    r.add_argument("--target-spacing", required=True, help="z,y,x or one value")
    r.add_argument("--nearest", action="store_true")
    s = psub.add_parser("smooth-labels", parents=[common])
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--tau", type=float, default=0.5)
    i = psub.add_parser("improve-labels", parents=[common])
    i.add_argument("--delta", type=float, default=0.1)
    i.add_argument("--threshold", type=float, default=0.9)
    i.add_argument("--filter-size", type=int, default=11)
    i.add_argument("--min-size", type=int, default=64)
    e = psub.add_parser("extract-patches", parents=[common])
    e.add_argument("--label")
    e.add_argument("--target", default="128")
    e.add_argument("--stride")
    e.add_argument("--zero-pad", action="store_true")
    for sp in (c, r, s, i, e):
        sp.set_defaults(func=cmd_preprocess)

    mix = sub.add_parser("mix", help="materialise items of the mixed training stream")
    mix.add_argument("--manifest", required=True)
    mix.add_argument("--weights", default="0.7,0.2,0.1")
    mix.add_argument("--count", type=int, required=True)
    mix.add_argument("--exclude", default="1,2,3,4", help="class ids never drawn ('' for none)")
    mix.add_argument("--suite", choices=("offline", "finetune"), default="offline")
    mix.add_argument("--seed", type=int)
    mix.add_argument("--config")
    mix.add_argument("--size", type=int)
    mix.add_argument("--out", required=True)
    mix.set_defaults(func=cmd_mix)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        _error_line(exc.code, exc)
        return exc.status
    except nifti.NiftiError as exc:
        _error_line(exc.code, exc)
        return 1
    except (ValueError, FileNotFoundError, OSError) as exc:
        _error_line(type(exc).__name__, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
