"""Command-line entry point: ``emtm synth|unify|train|eval|profile|replay``.

Every command resolves its options (built-in defaults, then ``--preset``,
then a ``key=value`` config file, then explicit flags), runs, and writes a
run manifest next to its outputs.  ``emtm replay`` re-runs a manifest and
checks that the outputs come out byte-identical.
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from . import data as D
from .errors import ConfigError, EMTMError, FormatError, NumericalError, ParseError
from .metrics import count_cost, evaluate, measure_student_latency
from .student_net import ModelConfig, decode_batch
from .trainer import (Checkpoint, TrainConfig, build_bundle, evaluate_student, load_bundle,
                      predict_arrays, spans_to_times, train)
from .unify import FORMATS, StartEndDistribution

logger = logging.getLogger("emtm")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_PARSE, EXIT_NUMERICAL = 0, 1, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"

MODEL_KEYS = {"d": int, "conv_kernel": int, "heads": int, "encoder_blocks": int,
              "dropout": float, "sigma": float, "alpha": float, "temperature": float,
              "kl_direction": str, "align_weight": float}
TRAIN_KEYS = {"lr": float, "batch_size": int, "epochs": int, "patience": int,
              "grad_clip": float}
SYNTH_KEYS = {"train": int, "val": int, "test": int, "n": int, "d_v": int, "d_q": int,
              "m_min": int, "m_max": int, "snr": float, "min_fraction": float,
              "max_fraction": float, "duration_min": float, "duration_max": float,
              "query_noise": float}

DEFAULTS = {
    # model, as published
    "d": 128, "conv_kernel": 7, "heads": 8, "encoder_blocks": 2, "dropout": 0.2,
    "sigma": None, "alpha": 0.1, "temperature": 1.0, "kl_direction": "ensemble_first",
    "align_weight": 0.0,
    # optimization
    "lr": 1e-4, "batch_size": 16, "epochs": 100, "patience": 10, "grad_clip": 1.0,
}
PRESETS = {
    "paper": {},
    "desk": {"d": 32, "dropout": 0.1, "lr": 1e-3, "epochs": 15, "patience": 5},
}
SYNTH_DEFAULTS = {k: getattr(D.SyntheticSpec(), k) for k in SYNTH_KEYS}
DEFAULT_TEACHERS = "span,map2d,proposals"
DEFAULT_TEACHER_NOISE = "0.5,1,2"


# ---------------------------------------------------------------------------
# option resolution
# ---------------------------------------------------------------------------


def _coerce(key, value, types):
    if value is None or value == "none" or value == "None":
        return None
    try:
        return types[key](value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def read_config_file(path, allowed):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}, line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"{path}, line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, allowed)
    return out


def resolve(args, keys, defaults):
    """Merge defaults < preset < config file < explicit flags for ``keys``."""
    opts = {k: defaults.get(k) for k in keys}
    preset = getattr(args, "preset", None)
    if preset:
        opts.update({k: v for k, v in PRESETS[preset].items() if k in keys})
    if getattr(args, "config", None):
        opts.update(read_config_file(args.config, keys))
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    return opts


def parse_list(text, kind=str, what="list"):
    if text is None or text == "":
        return []
    try:
        return [kind(x.strip()) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad {what}: {text!r}") from exc


# ---------------------------------------------------------------------------
# digests and manifests
# ---------------------------------------------------------------------------


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def path_digest(path):
    """sha256 of a file, or of every file under a directory (names included)."""
    p = Path(path)
    if p.is_file():
        return file_digest(p)
    if not p.is_dir():
        raise ConfigError(f"no such file or directory: {path}")
    h = hashlib.sha256()
    for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != MANIFEST_NAME):
        h.update(str(f.relative_to(p)).encode() + b"\0")
        h.update(file_digest(f).encode())
    return h.hexdigest()


def write_manifest(path, command, opts, inputs, outputs):
    manifest = {
        "tool": "emtm",
        "version": __version__,
        "backend": _kernels.backend(),
        "command": command,
        "options": opts,
        "seeds": opts.get("seeds", [opts["seed"]] if "seed" in opts else []),
        "inputs": {str(p): path_digest(p) for p in inputs},
        "outputs": {str(p): path_digest(p) for p in outputs},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _write(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)
    return str(path)


# ---------------------------------------------------------------------------
# commands; each takes resolved options and returns (inputs, outputs, manifest path)
# ---------------------------------------------------------------------------


def _teacher_specs(opts):
    formats = parse_list(opts["teachers"], what="teacher formats")
    if not formats:
        return []
    if opts["teacher_noise"] is None:
        levels = parse_list(DEFAULT_TEACHER_NOISE, float)
        noise = [levels[i % len(levels)] for i in range(len(formats))]
    else:
        noise = parse_list(opts["teacher_noise"], float, "teacher noise list")
    if len(noise) == 1:
        noise = noise * len(formats)
    if len(noise) != len(formats):
        raise ConfigError(f"{len(formats)} teacher formats but {len(noise)} noise levels")
    return [D.SimulatedTeacherSpec(f, s) for f, s in zip(formats, noise)]


def run_synth(opts):
    out = Path(opts["out"])
    spec = D.SyntheticSpec(seed=opts["seed"], **{k: opts[k] for k in SYNTH_KEYS})
    tspecs = _teacher_specs(opts)
    dataset = D.generate_dataset(spec)
    D.save_features(dataset, out)
    if tspecs:
        (out / "teachers").mkdir(parents=True, exist_ok=True)
        sims = D.simulate_teachers(dataset["train"], tspecs, opts["seed"])
        for t, (tspec, rows) in enumerate(zip(tspecs, sims)):
            D.save_teacher_dump(out / "teachers" / f"{t:02d}_{tspec.format}.jsonl", rows)
    sizes = {s: len(dataset[s]) for s in D.SPLITS}
    print(f"wrote {sum(sizes.values())} samples ({sizes}) and {len(tspecs)} teacher dumps to {out}")
    return [], [str(out)], out / MANIFEST_NAME


def run_unify(opts):
    sizes = None
    inputs = [opts["dump"]]
    if opts.get("dataset"):
        sizes = D.manifest_sizes(D.load_features(opts["dataset"]))
        inputs.append(opts["dataset"])
    rows = D.load_teacher_dump(opts["dump"], sizes)
    dists = D.unify_rows(rows, opts.get("sigma"))
    lines = []
    for sid, _, grid in rows:
        p = dists[sid]
        p.validate()
        lines.append(D.dumps_record({"sample_id": sid, "n": grid.n, "duration": grid.duration,
                                     "p_start": p.p_start, "p_end": p.p_end}))
    out = _write(opts["out"], "\n".join(lines) + "\n")
    print(f"unified {len(lines)} records into {out}")
    return inputs, [out], out + ".manifest.json"


def load_distributions(path):
    """Read a unified distribution file back into {sample_id: StartEndDistribution}."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                out[rec["sample_id"]] = StartEndDistribution(
                    np.array(rec["p_start"], dtype=np.float64), np.array(rec["p_end"], dtype=np.float64))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed distribution record ({exc})", path, lineno) from exc
    return out


def _model_config(opts, dataset, seed):
    first = dataset.all_samples()[0]
    m_max = dataset.spec.m_max if dataset.spec else max(s.m for s in dataset.all_samples())
    return ModelConfig(n=first.n, d_v=first.video.shape[1], d_q=first.query.shape[1], m_max=m_max,
                       seed=seed, **{k: opts[k] for k in MODEL_KEYS})


def _train_config(opts, seed):
    subset = opts.get("teacher_subset")
    return TrainConfig(seed=seed, use_shared_encoder=not opts["no_shared_encoder"],
                       use_label_distillation=not opts["no_label_distillation"],
                       teachers=None if subset is None else parse_list(subset, int, "teacher subset"),
                       **{k: opts[k] for k in TRAIN_KEYS})


def _summary(reports):
    keys = list(reports[0].keys())
    out = {}
    for k in keys:
        vals = [r[k] for r in reports]
        out[k] = {"mean": float(np.mean(vals)), "spread": float(np.std(vals)),
                  "values": [float(v) for v in vals]}
    return out


def train_runs(opts, dataset, dumps, out_dir, seeds):
    """Train one model per seed; returns (outputs, per-seed test reports)."""
    outputs, reports = [], []
    for seed in seeds:
        cfg = _model_config(opts, dataset, seed)
        tcfg = _train_config(opts, seed)
        need_bank = tcfg.use_shared_encoder or tcfg.use_label_distillation
        banks = []
        if need_bank:
            sizes = D.manifest_sizes(dataset)
            banks = [D.unify_rows(D.load_teacher_dump(p, sizes), cfg.gaussian_sigma) for p in dumps]
        bundle = build_bundle(cfg, tcfg, len(banks))
        tr = D.pack(dataset["train"], cfg.m_max, banks or None)
        va = D.pack(dataset["val"], cfg.m_max)
        logger.info("seed %d: %s, %d parameters", seed, tcfg.variant, bundle.store.size())
        ckpt, log = train(bundle, tr, va, tcfg)
        report = {}
        if dataset["test"]:
            rep, _, _ = evaluate_student(bundle.student, D.pack(dataset["test"], cfg.m_max),
                                         opts.get("threads", 1))
            report = rep.as_dict()
        report.update(best_epoch=ckpt.epoch, epochs_run=len(log))
        sd = Path(out_dir) / f"seed{seed}"
        sd.mkdir(parents=True, exist_ok=True)
        ckpt.save(sd / "checkpoint.emtm")
        outputs.append(str(sd / "checkpoint.emtm"))
        outputs.append(_write(sd / "metrics.jsonl", "".join(D.dumps_record(r) + "\n" for r in log)))
        outputs.append(_write(sd / "report.json", D.dumps_record(report) + "\n"))
        reports.append(report)
        print(f"seed {seed}: {tcfg.variant} best epoch {ckpt.epoch}, test "
              + ", ".join(f"{k}={v:.2f}" for k, v in report.items()
                          if k.startswith("r1") or k == "miou"))
    return outputs, reports


def _dump_list(opts):
    if opts.get("dumps"):
        return parse_list(opts["dumps"], what="dump list")
    return D.teacher_dump_paths(opts["data"])


def run_train(opts):
    dataset = D.load_features(opts["data"])
    if not dataset["train"] or not dataset["val"]:
        raise ConfigError("training needs non-empty train and val splits")
    dumps = _dump_list(opts)
    out = Path(opts["out"])
    outputs, reports = train_runs(opts, dataset, dumps, out, opts["seeds"])
    summary = _summary(reports)
    outputs.append(_write(out / "summary.json", D.dumps_record(summary) + "\n"))
    if "miou" in summary:
        print("summary over seeds " + ", ".join(map(str, opts["seeds"])) + ": "
              + ", ".join(f"{k} {summary[k]['mean']:.2f} +/- {summary[k]['spread']:.2f}"
                          for k in summary if k.startswith("r1") or k == "miou"))
    return [opts["data"]] + dumps, outputs, out / MANIFEST_NAME


def run_eval(opts):
    ckpt = Checkpoint.load(opts["checkpoint"])
    dataset = D.load_features(opts["data"])
    samples = dataset[opts["split"]]
    if not samples:
        raise ConfigError(f"split {opts['split']!r} is empty")
    bundle = load_bundle(ckpt)
    arr = D.pack(samples, ckpt.config.m_max)
    probs = predict_arrays(bundle.student, arr, opts["threads"])
    times = spans_to_times(decode_batch(probs), arr.durations, probs.shape[-1])
    report = evaluate([tuple(t) for t in times], [tuple(t) for t in arr.times],
                      sumacc=opts["sumacc"])
    print(report.table())
    out = opts["out"] or str(Path(opts["checkpoint"]).with_suffix("")) + f".eval-{opts['split']}.json"
    out = _write(out, D.dumps_record(report.as_dict()) + "\n")
    return [opts["checkpoint"], opts["data"]], [out], out + ".manifest.json"


def run_profile(opts):
    out = Path(opts["out"])
    sweep = parse_list(opts["sweep_d"], int, "--sweep-d list") if opts["sweep_d"] else [opts["d"]]
    dataset = D.load_features(opts["data"]) if opts.get("data") else None
    dumps = _dump_list(opts) if dataset is not None else []
    rows, outputs, timing = [], [], {}
    for d in sweep:
        o = dict(opts, d=d)
        if dataset is not None:
            cfg = _model_config(o, dataset, opts["seeds"][0])
        else:
            cfg = ModelConfig(**{k: o[k] for k in MODEL_KEYS})
        cost = count_cost(cfg, "inference")
        row = {"d": d, "flops": cost.flops, "params": cost.params, "r1@0.7": "", "miou": ""}
        if dataset is not None:
            outs, reports = train_runs(o, dataset, dumps, out / f"d{d}", opts["seeds"])
            outputs += outs
            row["r1@0.7"] = repr(float(np.mean([r["r1@0.7"] for r in reports])))
            row["miou"] = repr(float(np.mean([r["miou"] for r in reports])))
        if opts["latency"]:
            med, iqr = measure_student_latency(cfg, runs=opts["latency"])
            timing[str(d)] = {"time_ms": med, "time_iqr_ms": iqr}
        rows.append(row)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["d", "flops", "params", "r1@0.7", "miou"],
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    outputs.append(_write(out / "profile.csv", buf.getvalue()))
    print(buf.getvalue(), end="")
    if timing:
        # wall-clock numbers vary run to run, so they stay out of the manifest digests
        _write(out / "timing.json", json.dumps(timing, indent=2) + "\n")
        for d, t in timing.items():
            print(f"d={d}: {t['time_ms']:.3f} ms/sample (IQR {t['time_iqr_ms']:.3f})")
    inputs = ([opts["data"]] + dumps) if dataset is not None else []
    return inputs, outputs, out / MANIFEST_NAME


COMMANDS = {"synth": run_synth, "unify": run_unify, "train": run_train, "eval": run_eval,
            "profile": run_profile}


def run_command(command, opts):
    inputs, outputs, manifest_path = COMMANDS[command](opts)
    return write_manifest(manifest_path, command, opts, inputs, outputs)


def replay(manifest_path, check_inputs=True):
    """Re-run a manifest; returns the list of outputs whose digest changed."""
    try:
        manifest = json.loads(Path(manifest_path).read_text())
        command, opts = manifest["command"], manifest["options"]
    except (OSError, ValueError, KeyError) as exc:
        raise ParseError(f"unreadable run manifest ({exc})", manifest_path) from exc
    if command not in COMMANDS:
        raise ConfigError(f"manifest names unknown command {command!r}")
    if check_inputs:
        for p, digest in manifest["inputs"].items():
            if path_digest(p) != digest:
                raise ConfigError(f"input {p} changed since the manifest was written")
    expected = manifest["outputs"]
    fresh = run_command(command, opts)
    return [p for p, h in expected.items() if fresh["outputs"].get(p) != h]


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_keys(p, keys, label):
    g = p.add_argument_group(label)
    for k, t in keys.items():
        g.add_argument("--" + k.replace("_", "-"), dest=k, type=t, default=None)


def _add_common(p, seeds=False):
    p.add_argument("--config", help="key=value file; explicit flags take precedence")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named default bundle (desk = small and fast)")
    if seeds:
        p.add_argument("--seeds", help="comma-separated seeds, one run each")
    p.add_argument("--seed", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="emtm", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"emtm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset and simulated teacher dumps")
    p.add_argument("--out", required=True)
    p.add_argument("--teachers", default=DEFAULT_TEACHERS,
                   help=f"comma-separated formats from {', '.join(FORMATS)}; empty for none")
    p.add_argument("--teacher-noise", dest="teacher_noise", default=None,
                   help="boundary noise (clips) per teacher, or one value for all "
                        f"(default {DEFAULT_TEACHER_NOISE}, cycled)")
    _add_keys(p, SYNTH_KEYS, "dataset")
    _add_common(p)

    p = sub.add_parser("unify", help="convert a teacher dump to start/end distributions")
    p.add_argument("dump")
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=None, help="Gaussian width in clips (default n/20)")
    p.add_argument("--dataset", help="dataset dir used to validate sample ids and clip counts")

    for name, helptext in (("train", "train the student (with its twin and KAU unless ablated)"),
                           ("profile", "closed-form FLOPs/params, optionally trained quality")):
        p = sub.add_parser(name, help=helptext)
        if name == "train":
            p.add_argument("data", help="dataset directory written by synth")
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--data", help="dataset directory; when given each d is also trained")
            p.add_argument("--out", required=True)
            p.add_argument("--sweep-d", dest="sweep_d", help="comma-separated hidden sizes")
            p.add_argument("--latency", type=int, default=0, help="timed runs per d (0 = skip)")
        p.add_argument("--dumps", help="comma-separated teacher dumps (default DATA/teachers/*.jsonl)")
        p.add_argument("--no-shared-encoder", dest="no_shared_encoder", action="store_true")
        p.add_argument("--no-label-distillation", dest="no_label_distillation", action="store_true")
        p.add_argument("--teachers", dest="teacher_subset", help="indices of offline teachers to use")
        p.add_argument("--threads", type=int, default=1)
        _add_keys(p, MODEL_KEYS, "model")
        _add_keys(p, TRAIN_KEYS, "optimization")
        _add_common(p, seeds=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--split", default="test", choices=D.SPLITS)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--sumacc", default="caption", choices=("caption", "body"))
    p.add_argument("--out")

    p = sub.add_parser("replay", help="re-run a run manifest and compare output digests")
    p.add_argument("manifest")
    p.add_argument("--no-input-check", dest="check_inputs", action="store_false")
    return parser


def options_from_args(args):
    """Materialize every option the command will use."""
    cmd = args.command
    if cmd == "synth":
        opts = resolve(args, {**SYNTH_KEYS, "seed": int}, {**SYNTH_DEFAULTS, "seed": 0})
        opts.update(out=args.out, teachers=args.teachers, teacher_noise=args.teacher_noise)
        return opts
    if cmd == "unify":
        return {"dump": args.dump, "out": args.out, "sigma": args.sigma, "dataset": args.dataset}
    if cmd == "eval":
        return {"checkpoint": args.checkpoint, "data": args.data, "split": args.split,
                "threads": args.threads, "sumacc": args.sumacc, "out": args.out}
    opts = resolve(args, {**MODEL_KEYS, **TRAIN_KEYS, "seed": int}, {**DEFAULTS, "seed": 0})
    seeds = parse_list(args.seeds, int, "seed list") if args.seeds is not None else [opts.pop("seed")]
    opts.pop("seed", None)
    if not seeds:
        raise ConfigError("empty seed list")
    opts.update(data=args.data, out=args.out, dumps=args.dumps, seeds=seeds,
                no_shared_encoder=args.no_shared_encoder,
                no_label_distillation=args.no_label_distillation,
                teacher_subset=args.teacher_subset, threads=args.threads, preset=args.preset)
    if cmd == "profile":
        opts.update(sweep_d=args.sweep_d, latency=args.latency)
    return opts


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            changed = replay(args.manifest, args.check_inputs)
            if changed:
                print("outputs differ from the manifest: " + ", ".join(changed), file=sys.stderr)
                return EXIT_FAIL
            print("replay reproduced every output")
            return EXIT_OK
        run_command(args.command, options_from_args(args))
    except FormatError as exc:
        print(f"emtm: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except NumericalError as exc:
        print(f"emtm: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (EMTMError, FileNotFoundError) as exc:
        print(f"emtm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
