"""``depscreen`` command line.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import audio_io, dataset, dsp, metrics, segmenter, trainer
from .errors import DataError, DepscreenError, InvalidConfig, NumericError

log = logging.getLogger("depscreen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class Outputs:
    """Tracks files/directories a command creates so failures can undo them."""

    def __init__(self):
        self._paths: list[Path] = []

    def dir(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            path.mkdir(parents=True)
            self._paths.append(path)
        return path

    def file(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self._paths.append(path)
        return path

    def rollback(self) -> None:
        for p in reversed(self._paths):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


# -- helpers -------------------------------------------------------------------


def _rebase(manifest: dataset.Manifest, new_root: Path) -> dataset.Manifest:
    recs = []
    for r in manifest.records:
        src = manifest.resolve(r).resolve()
        rel = os.path.relpath(src, new_root.resolve())
        recs.append(dataset.SampleRecord(r.participant_id, rel, r.phq8, r.split, r.segment))
    return dataset.Manifest(recs, manifest.seed, new_root)


def _positive_int(v):
    i = int(v)
    if i < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return i


def _lr_arg(v):
    if v.lower() in ("find", "auto"):
        return None
    f = float(v)
    if f <= 0:
        raise argparse.ArgumentTypeError("learning rate must be positive")
    return f


def _require_file(path, what):
    if not Path(path).is_file():
        raise DataError(f"{what} not found: {path}")


# -- per-file workers (top level so they pickle) -------------------------------


def _segment_one(args):
    src, out_dir, pid, policy = args
    buf = audio_io.read_wav(src)
    buf.source_id = pid
    out = []
    for w in segmenter.plan_segments(buf.duration_s, policy):
        seg = segmenter.extract_segment(buf, w)
        rel = f"wav/{pid}_{w.index:03d}.wav"
        audio_io.write_wav(Path(out_dir) / rel, seg)
        out.append((w.index, rel))
    return out


def _spectrogram_one(args):
    src, dst, factor, config, size, colormap = args
    buf = audio_io.read_wav(src)
    img = dsp.preprocess_segment(buf, factor, None, config, size, colormap)
    dsp.save_png(img, dst)


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- subcommands -----------------------------------------------------------------


def cmd_synth(a, outs: Outputs):
    params = dataset.SynthParams(duration_s=a.duration, sample_rate_hz=a.rate)
    total = 2 * a.per_class if a.total is None else a.total
    if total < 1:
        raise UsageError("--total must be >= 1")
    if a.depressed is not None and not 0 <= a.depressed <= total:
        raise UsageError("--depressed must be between 0 and the corpus size")
    out = outs.dir(a.out)
    outs.dir(out / "wav")
    outs.file(out / "manifest.csv")
    man = dataset.generate_synthetic_corpus(a.per_class, a.seed, out, params, a.depressed, a.total)
    print(f"wrote {len(man)} recordings to {out}")


def cmd_segment(a, outs: Outputs):
    policy = segmenter.SegmentPolicy(a.offset, a.window, a.until)
    _require_file(a.manifest, "manifest")
    man = dataset.load_manifest(a.manifest)
    out = outs.dir(a.out)
    outs.dir(out / "wav")
    jobs = [(man.resolve(r), out, r.participant_id, policy) for r in man.records]
    results = _map(_segment_one, jobs, a.jobs)
    recs = []
    for r, segs in zip(man.records, results):
        for idx, rel in segs:
            recs.append(dataset.SampleRecord(r.participant_id, rel, r.phq8, r.split, idx))
    dataset.save_manifest(dataset.Manifest(recs, man.seed, out), outs.file(out / "manifest.csv"))
    print(f"wrote {len(recs)} segments from {len(man)} recordings to {out}")


def cmd_spectrogram(a, outs: Outputs):
    config = dsp.SpectrogramConfig(a.fft, a.hop)
    colormap = dsp.load_colormap(a.colormap) if a.colormap else dsp.GRAYSCALE
    if a.size < 16:
        raise UsageError("--size must be >= 16")
    src_manifest = Path(a.input) / "manifest.csv"
    _require_file(src_manifest, "segment manifest")
    man = dataset.load_manifest(src_manifest)
    out = outs.dir(a.out)
    outs.dir(out / "img")
    recs, jobs = [], []
    for r in man.records:
        rel = f"img/{Path(r.path).stem}.png"
        jobs.append((man.resolve(r), out / rel, a.decimate, config, a.size, colormap))
        recs.append(dataset.SampleRecord(r.participant_id, rel, r.phq8, r.split, r.segment))
    _map(_spectrogram_one, jobs, a.jobs)
    dataset.save_manifest(dataset.Manifest(recs, man.seed, out), outs.file(out / "manifest.csv"))
    print(f"wrote {len(recs)} spectrogram images to {out}")


def cmd_split(a, outs: Outputs):
    if not 0 < a.test_frac < 1:
        raise UsageError("--test-frac must be in (0, 1)")
    _require_file(a.manifest, "manifest")
    man = dataset.load_manifest(a.manifest)
    train, test = dataset.split(man, a.test_frac, a.seed, a.by_participant)
    out = Path(a.out) if a.out else Path(a.manifest).with_name("split.csv")
    # keep original record order
    side = {r.key: r.split for r in train.records + test.records}
    merged = dataset.Manifest(
        [dataset.SampleRecord(r.participant_id, r.path, r.phq8, side[r.key], r.segment) for r in man.records],
        a.seed, man.root,
    )
    if out.parent.resolve() != Path(a.manifest).parent.resolve():
        outs.dir(out.parent)
        merged = _rebase(merged, out.parent)
    dataset.save_manifest(merged, outs.file(out))
    print(f"train {len(train)}  test {len(test)}  -> {out}")


def _train_records(man: dataset.Manifest) -> dataset.Manifest:
    return dataset.Manifest([r for r in man.records if r.split != dataset.Split.TEST], man.seed, man.root)


def _plan_from_args(a) -> trainer.TrainPlan:
    try:
        return trainer.TrainPlan(
            head_lr=a.head_lr, body_lr=a.body_lr, disc_factor=a.disc_factor,
            cycle_len=a.cycle_len, cycle_mult=a.cycle_mult, batch_size=a.batch,
            seed=a.seed, max_cycles=a.max_cycles, lr_find_iters=a.lr_find_iters,
            augment=dataset.AugmentSpec(rng_seed=a.seed),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _model_config(a, input_size):
    from .nn import ModelConfig

    try:
        return ModelConfig.from_arch(a.arch, input_size=input_size)
    except InvalidConfig as exc:
        raise UsageError(str(exc)) from None


def cmd_lr_find(a, outs: Outputs):
    _require_file(a.manifest, "manifest")
    man = _train_records(dataset.load_manifest(a.manifest))
    data = dataset.load_image_set(man)
    if len(data) == 0:
        raise DataError("no training images in manifest")
    config = _model_config(a, data.images.shape[-1])
    model, _ = trainer.pretrain_proxy(config, a.seed, epochs=a.pretrain_epochs)
    curve = trainer.lr_find(model, data.images, data.labels, iters=a.iters,
                            batch_size=a.batch, seed=a.seed)
    curve.to_csv(outs.file(a.out))
    try:
        print(f"suggested lr {trainer.suggest_lr(curve):.4g}")
    except (ValueError, NumericError) as exc:
        print(f"no suggestion: {exc}")


def cmd_train(a, outs: Outputs):
    from .nn import save_checkpoint

    plan = _plan_from_args(a)
    if not 0 < a.val_frac < 1:
        raise UsageError("--val-frac must be in (0, 1)")
    _require_file(a.manifest, "manifest")
    man = _train_records(dataset.load_manifest(a.manifest))
    man = dataset.Manifest([dataset.SampleRecord(r.participant_id, r.path, r.phq8, None, r.segment)
                            for r in man.records], man.seed, man.root)
    tr_m, val_m = dataset.split(man, a.val_frac, a.seed)
    if a.oversample:
        tr_m = dataset.oversample_minority(tr_m, a.seed)
    train, val = dataset.load_image_set(tr_m), dataset.load_image_set(val_m)
    if len(train) == 0 or len(val) == 0:
        raise DataError("training or validation split is empty")
    config = _model_config(a, train.images.shape[-1])
    model, _ = trainer.pretrain_proxy(config, a.seed, epochs=a.pretrain_epochs)
    model, hist = trainer.fine_tune(model, train, val, plan)
    ckpt = Path(a.out)
    if ckpt.parent != Path(""):
        outs.dir(ckpt.parent)
    save_checkpoint(model, outs.file(ckpt))
    hist.to_csv(outs.file(f"{ckpt}.history.csv"))
    hist.lr_trace_csv(outs.file(f"{ckpt}.lr.csv"))
    print(f"best val loss {hist.best_val_loss:.4f} ({hist.stop_reason}); checkpoint {ckpt}")
    print(f"model digest {model.digest()}")


def _predictions(model, images, tta, seed):
    spec = dataset.AugmentSpec(rng_seed=seed)
    probs = []
    for chw in images:
        img = dsp.ImageTensor(chw.transpose(1, 2, 0))
        p = trainer.predict_tta(model, img, spec, tta) if tta else trainer.predict(model, img)
        probs.append(p)
    return np.array(probs)


def cmd_evaluate(a, outs: Outputs):
    from .nn import load_checkpoint

    if a.tta < 0:
        raise UsageError("--tta must be >= 0")
    _require_file(a.ckpt, "checkpoint")
    _require_file(a.manifest, "manifest")
    model = load_checkpoint(a.ckpt)
    man = dataset.load_manifest(a.manifest)
    if a.split != "all" and man.has_split:
        man = man.subset(dataset.Split(a.split))
    data = dataset.load_image_set(man)
    if len(data) == 0:
        raise DataError("nothing to evaluate")
    probs = _predictions(model, data.images, a.tta, a.seed)
    cm = metrics.confusion(probs.argmax(axis=1), data.labels)
    rep = metrics.report(cm)
    name = f"{model.config.arch_tag}" + (f"+TTA{a.tta}" if a.tta else "")
    print(metrics.format_table([(name, rep)]))
    print()
    print(metrics.format_confusion(cm))
    line = metrics.to_json_line(name, cm, rep)
    print(line)
    if a.json:
        Path(outs.file(a.json)).write_text(line + "\n", encoding="utf-8")


def cmd_predict(a, outs: Outputs):
    from .nn import load_checkpoint

    _require_file(a.ckpt, "checkpoint")
    _require_file(a.wav, "wav file")
    model = load_checkpoint(a.ckpt)
    buf = audio_io.read_wav(a.wav)
    seg = segmenter.segment_buffer(buf, segmenter.SegmentPolicy(a.offset, a.window, None))[0]
    img = dsp.preprocess_segment(seg, a.decimate, None, dsp.SpectrogramConfig(a.fft, a.hop),
                                 model.config.input_size)
    probs = trainer.predict_tta(model, img, dataset.AugmentSpec(rng_seed=a.seed), a.tta)
    label = dataset.Label(int(np.argmax(probs)))
    name = "Depressed" if label == dataset.Label.DEPRESSED else "Non-depressed"
    print(f"{name}  p(non-depressed)={probs[0]:.4f}  p(depressed)={probs[1]:.4f}")


def cmd_plot(a, outs: Outputs):
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    _require_file(a.history, "history CSV")
    with open(a.history, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    lr_path = Path(a.lr_trace) if a.lr_trace else Path(str(a.history).replace(".history.csv", ".lr.csv"))
    n_panels = 2 if lr_path.is_file() else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(5 * n_panels, 4), squeeze=False)
    ep = [int(r["epoch"]) for r in rows]
    axes[0, 0].plot(ep, [float(r["train_loss"]) for r in rows], label="train")
    axes[0, 0].plot(ep, [float(r["val_loss"]) for r in rows], label="validation")
    axes[0, 0].set_xlabel("epoch")
    axes[0, 0].set_ylabel("loss")
    axes[0, 0].legend()
    if n_panels == 2:
        with open(lr_path, newline="", encoding="utf-8") as fh:
            lr_rows = list(csv.DictReader(fh))
        axes[0, 1].plot([int(r["step"]) for r in lr_rows], [float(r["lr"]) for r in lr_rows])
        axes[0, 1].set_xlabel("iteration")
        axes[0, 1].set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(outs.file(a.out), metadata={"Software": None})
    plt.close(fig)
    print(f"wrote {a.out}")


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depscreen", description=__doc__.splitlines()[0])
    p.add_argument("--log", help="append timestamped log lines to this file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic two-class corpus")
    s.add_argument("--per-class", type=_positive_int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--duration", type=float, default=80.0, help="seconds per recording")
    s.add_argument("--rate", type=_positive_int, default=16000)
    s.add_argument("--depressed", type=int, help="depressed count (default: per-class)")
    s.add_argument("--total", type=int, help="corpus size (default: 2 * per-class)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("segment", help="cut recordings into fixed windows")
    s.add_argument("--manifest", required=True)
    s.add_argument("--offset", type=float, default=60.0)
    s.add_argument("--window", type=float, default=15.0)
    s.add_argument("--until", type=float, default=None,
                   help="end of the extended window range, e.g. 420 (omit for one window)")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=_positive_int, default=1)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("spectrogram", help="render segment spectrogram images")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--size", type=int, default=224)
    s.add_argument("--colormap")
    s.add_argument("--fft", type=int, default=512)
    s.add_argument("--hop", type=int, default=128)
    s.add_argument("--decimate", type=_positive_int, default=2)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=_positive_int, default=1)
    s.set_defaults(func=cmd_spectrogram)

    s = sub.add_parser("split", help="assign train/test split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--test-frac", type=float, default=0.25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--by-participant", action="store_true")
    s.add_argument("--out", help="output manifest (default: split.csv beside the input)")
    s.set_defaults(func=cmd_split)

    def model_flags(s):
        s.add_argument("--manifest", required=True)
        s.add_argument("--arch", default="mini-18")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--batch", type=_positive_int, default=16)
        s.add_argument("--pretrain-epochs", type=int, default=3)

    s = sub.add_parser("lr-find", help="learning-rate range test")
    model_flags(s)
    s.add_argument("--iters", type=_positive_int, default=100)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_lr_find)

    s = sub.add_parser("train", help="staged fine-tuning")
    model_flags(s)
    s.add_argument("--head-lr", type=_lr_arg, default=0.01, help="float or 'find'")
    s.add_argument("--body-lr", type=_lr_arg, default=None, help="float or 'find' (default)")
    s.add_argument("--disc-factor", type=float, default=10.0)
    s.add_argument("--cycle-len", type=_positive_int, default=1)
    s.add_argument("--cycle-mult", type=_positive_int, default=2)
    s.add_argument("--max-cycles", type=_positive_int, default=10)
    s.add_argument("--lr-find-iters", type=int, default=100)
    s.add_argument("--val-frac", type=float, default=0.2)
    s.add_argument("--oversample", action="store_true", help="balance classes by duplication")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="metrics and confusion matrix")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--tta", type=int, default=4)
    s.add_argument("--split", choices=["test", "train", "all"], default="test")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json", help="also write the JSON metric line here")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="classify one recording")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--wav", required=True)
    s.add_argument("--tta", type=int, default=4)
    s.add_argument("--offset", type=float, default=60.0)
    s.add_argument("--window", type=float, default=15.0)
    s.add_argument("--decimate", type=_positive_int, default=2)
    s.add_argument("--fft", type=int, default=512)
    s.add_argument("--hop", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("plot", help="loss and learning-rate curves")
    s.add_argument("--history", required=True)
    s.add_argument("--lr-trace")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def _setup_logging(a):
    root = logging.getLogger("depscreen")
    root.handlers.clear()
    root.setLevel(logging.DEBUG)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if a.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(console)
    if a.log:
        fh = logging.FileHandler(a.log)
        fh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        root.addHandler(fh)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    _setup_logging(a)
    outs = Outputs()
    log.info("depscreen %s", " ".join(argv if argv is not None else sys.argv[1:]))
    try:
        a.func(a, outs)
        log.info("%s finished", a.command)
        return EXIT_OK
    except (UsageError, InvalidConfig, ValueError) as exc:
        outs.rollback()
        print(f"depscreen {a.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        outs.rollback()
        print(f"depscreen {a.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DepscreenError, OSError) as exc:
        outs.rollback()
        print(f"depscreen {a.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BaseException:
        outs.rollback()
        raise


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
