"""Command-line interface and experiment orchestration.

Subcommands: mask-gen, degrade, phantoms, pretrain, finetune, eval,
stability. The config-driven commands read one JSON experiment file, fully
validate it before touching the filesystem, and hold a lock file in the
output directory for the duration of a run. Diagnostics go to stderr; data
goes to files and stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from .dataio import (build_samples, center_crop, epoch_stream, load_image,
                     load_manifest, normalize_minmax, phantom_set,
                     resize_bilinear, save_png, save_raster, write_manifest)
from .degradation import (Mask, MaskError, MaskFamily, MaskSpec,
                          achieved_acceleration, degrade, make_mask)
from .metrics import (PerImageResult, aggregate_report, emit_csv,
                      emit_markdown, error_map, psnr, ssim)
from .model import MRIPT, ModelConfig, desk_config, paper_config, tiny_config
from .training import (TrainConfig, load_checkpoint,
                       save_checkpoint, save_loss_trace, train)

PRESETS = {"desk": desk_config, "tiny": tiny_config, "paper": paper_config}

_EVAL_SEED_GAP = 100000  # phantom seeds below this belong to training pools


def log(msg: str) -> None:
    print(msg, file=sys.stderr)


def configure_threads() -> int:
    """Apply MRIPT_THREADS (0 or unset = deterministic single thread)."""
    raw = os.environ.get("MRIPT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"MRIPT_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise SystemExit(f"MRIPT_THREADS must be >= 0, got {n}")
    limit = n if n > 0 else 1
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(limit)
    try:  # only effective if the host BLAS already started its pool
        import threadpoolctl
        threadpoolctl.threadpool_limits(limit)
    except ImportError:
        pass
    return limit


class OutputLock:
    """Exclusive .lock file so two runs cannot share an output directory."""

    def __init__(self, output_dir: str):
        self.path = os.path.join(output_dir, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise SystemExit(f"output directory is locked by another run: {self.path}")
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


@dataclass
class DataConfig:
    train_count: int = 128
    eval_count: int = 32
    seed: int = 7
    manifest: str | None = None

    def __post_init__(self):
        if self.train_count < 1 or self.eval_count < 1:
            raise ValueError("train_count and eval_count must be >= 1")
        if self.seed < 0 or self.seed >= _EVAL_SEED_GAP:
            raise ValueError(f"data seed must be in [0, {_EVAL_SEED_GAP})")


@dataclass
class ExperimentConfig:
    output_dir: str
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    eval_tasks: tuple[MaskSpec, ...]
    downstream: tuple[MaskSpec, ...]


def _model_from_json(section: dict) -> ModelConfig:
    d = dict(section or {})
    preset = d.pop("preset", "desk")
    if preset not in PRESETS:
        raise ValueError(f"unknown model preset {preset!r}")
    return PRESETS[preset](**d)


def _task_from_json(section: dict, default_offset: int | None) -> MaskSpec:
    d = dict(section)
    if "family" not in d or "acceleration" not in d:
        raise ValueError(f"task needs family and acceleration: {section!r}")
    return MaskSpec(
        family=MaskFamily(d.pop("family")),
        acceleration=float(d.pop("acceleration")),
        center_fraction=d.pop("center_fraction", None),
        sigma_fraction=d.pop("sigma_fraction", 1.0 / 6.0),
        offset=d.pop("offset", default_offset),
        **({} if not d else (_ for _ in ()).throw(ValueError(f"unknown task keys {sorted(d)}"))),
    )


def load_experiment_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise SystemExit(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise SystemExit(f"config {path} is not valid JSON: {e}")
    try:
        model = _model_from_json(raw.get("model", {}))
        train_cfg = TrainConfig(**raw.get("train", {}))
        data = DataConfig(**raw.get("data", {}))
        # equispaced eval combs default to offset 0 for a deterministic layout
        eval_tasks = tuple(_task_from_json(t, default_offset=0)
                           for t in raw.get("eval_tasks",
                                            [{"family": "random", "acceleration": 4.0}]))
        downstream = tuple(_task_from_json(t, default_offset=None)
                           for t in raw.get("downstream",
                                            [{"family": "random", "acceleration": 4.0}]))
        output_dir = raw.get("output_dir")
        if not output_dir:
            raise ValueError("output_dir is required")
        extra = set(raw) - {"model", "train", "data", "eval_tasks", "downstream", "output_dir"}
        if extra:
            raise ValueError(f"unknown config sections {sorted(extra)}")
    except (TypeError, ValueError, MaskError) as e:
        raise SystemExit(f"config {path} is invalid: {e}")
    return ExperimentConfig(output_dir=output_dir, model=model, train=train_cfg,
                            data=data, eval_tasks=eval_tasks, downstream=downstream)


def prepare_image(arr: np.ndarray, size: int) -> np.ndarray:
    """Square center crop, bilinear resize to the model size, then min-max
    normalize to [0, 1]."""
    a = np.asarray(arr, dtype=np.float32)
    side = min(a.shape[-2:])
    return normalize_minmax(resize_bilinear(center_crop(a, side), size))


def _manifest_images(cfg: ExperimentConfig, split: str) -> list[np.ndarray]:
    manifest = load_manifest(cfg.data.manifest)
    paths = manifest.paths(split)
    if not paths:
        raise SystemExit(f"manifest has no images for split {split!r}")
    return [prepare_image(load_image(p), cfg.model.image_size) for p in paths]


def train_images(cfg: ExperimentConfig) -> list[np.ndarray]:
    if cfg.data.manifest:
        return _manifest_images(cfg, "train")
    return phantom_set(cfg.data.train_count, cfg.model.image_size, cfg.data.seed)


def eval_images(cfg: ExperimentConfig) -> list[np.ndarray]:
    if cfg.data.manifest:
        return _manifest_images(cfg, "test")
    return phantom_set(cfg.data.eval_count, cfg.model.image_size,
                       cfg.data.seed + _EVAL_SEED_GAP)


def pretrain_tasks(cfg: ExperimentConfig) -> list[MaskSpec]:
    return [MaskSpec(family=f, acceleration=r)
            for f in cfg.model.families for r in cfg.model.ratios]


def evaluate_model(model: MRIPT, images, task: MaskSpec, seed: int,
                   dataset: str = "phantom", tag: str = "mript",
                   with_zero_filled: bool = True,
                   error_map_dir: str | None = None) -> list[PerImageResult]:
    """Per-image PSNR/SSIM of the model (and the zero-filled input) against
    the clean target under one degradation task."""
    results = []
    fam = task.family.value
    for i, s in enumerate(build_samples(images, [task], seed)):
        recon = model.forward(s.input, s.label).data
        results.append(PerImageResult(dataset, fam, task.acceleration, tag,
                                      psnr(recon, s.target), ssim(recon, s.target)))
        if with_zero_filled:
            results.append(PerImageResult(dataset, fam, task.acceleration, "zero-filled",
                                          psnr(s.input, s.target), ssim(s.input, s.target)))
        if error_map_dir is not None and i == 0:
            stem = f"{fam}_x{task.acceleration:g}"
            save_png(os.path.join(error_map_dir, f"error_{stem}_{tag}.png"),
                     error_map(recon, s.target))
            if with_zero_filled:
                save_png(os.path.join(error_map_dir, f"error_{stem}_zero-filled.png"),
                         error_map(s.input, s.target))
    return results


def _mean(xs) -> float:
    xs = list(xs)
    return math.fsum(xs) / len(xs)


def mean_psnr(results: list[PerImageResult], tag: str) -> float:
    vals = [r.psnr_db for r in results if r.model == tag and math.isfinite(r.psnr_db)]
    return _mean(vals) if vals else math.inf


def mean_ssim(results: list[PerImageResult], tag: str) -> float:
    return _mean(r.ssim for r in results if r.model == tag)


# -- subcommands -----------------------------------------------------------


def cmd_mask_gen(args) -> int:
    try:
        spec = MaskSpec(family=MaskFamily(args.family), acceleration=args.acc,
                        center_fraction=args.center_fraction,
                        sigma_fraction=args.sigma_fraction,
                        offset=args.offset, seed=args.seed)
        mask = make_mask(spec, (args.size, args.size))
    except (MaskError, ValueError) as e:
        log(f"mask-gen: {e}")
        return 2
    save_raster(args.out + ".mrit", mask.to_float())
    save_png(args.out + ".png", mask.to_float())
    log(f"mask-gen: wrote {args.out}.mrit and {args.out}.png")
    print(f"achieved_acceleration={achieved_acceleration(mask):.4f}")
    return 0


def cmd_degrade(args) -> int:
    try:
        img = load_image(args.image)
    except Exception as e:
        log(f"degrade: cannot read image: {e}")
        return 2
    if args.normalize:
        img = normalize_minmax(img)
    try:
        from .dataio import load_raster
        kept = load_raster(args.mask)
    except Exception as e:
        log(f"degrade: cannot read mask: {e}")
        return 2
    if kept.ndim != 2:
        log(f"degrade: mask raster must be 2-d, got dims {kept.shape}")
        return 2
    mask = Mask(kept > 0.5, None)
    try:
        out = degrade(img, mask)
    except ValueError as e:
        log(f"degrade: {e}")
        return 2
    save_raster(args.out + ".mrit", out)
    save_png(args.out + ".png", out)
    if args.error_map:
        save_png(args.error_map, error_map(out, img, gain=args.gain))
    print(f"zero_filled_psnr_db={psnr(out, img):.4f}")
    return 0


def cmd_phantoms(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    names = []
    for i in range(args.count):
        img = phantom_set(1, args.size, args.seed + i)[0]
        name = f"phantom_{i:04d}.mrit"
        save_raster(os.path.join(args.out_dir, name), img)
        if args.png:
            save_png(os.path.join(args.out_dir, f"phantom_{i:04d}.png"), img)
        names.append(name)
    write_manifest(os.path.join(args.out_dir, "manifest.csv"),
                   [(n, "train") for n in names])
    log(f"phantoms: wrote {args.count} images and manifest.csv to {args.out_dir}")
    print(f"count={args.count}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_experiment_config(args.config)
    os.makedirs(cfg.output_dir, exist_ok=True)
    with OutputLock(cfg.output_dir):
        images = train_images(cfg)
        tasks = pretrain_tasks(cfg)
        model = MRIPT(cfg.model, init_seed=cfg.train.seed)
        stream = epoch_stream(images, tasks, cfg.train.seed,
                              cfg.train.pretrain_epochs)
        log(f"pretrain: {len(images)} images, {len(tasks)} tasks, "
            f"{cfg.train.pretrain_epochs} epochs")
        trace = train(model, stream, cfg.train, mode="pretrain")
        ckpt = os.path.join(cfg.output_dir, "pretrain.ckpt")
        save_checkpoint(ckpt, model, step=len(trace), mode="pretrain")
        save_loss_trace(os.path.join(cfg.output_dir, "pretrain_loss.csv"), trace)
    print(f"steps={len(trace)} final_loss={trace[-1]:.6f} checkpoint={ckpt}")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_experiment_config(args.config)
    os.makedirs(cfg.output_dir, exist_ok=True)
    with OutputLock(cfg.output_dir):
        ckpt_in = load_checkpoint(args.checkpoint)
        model, start_step = ckpt_in.model, ckpt_in.step
        if model.config != cfg.model:
            log("finetune: checkpoint config differs from experiment config; "
                "using the checkpoint's")
        images = train_images(cfg)
        stream = epoch_stream(images, list(cfg.downstream), cfg.train.seed + 1,
                              cfg.train.finetune_epochs)
        log(f"finetune: {len(images)} images, {len(cfg.downstream)} downstream tasks, "
            f"{cfg.train.finetune_epochs} epochs")
        trace = train(model, stream, cfg.train, mode="finetune")
        ckpt = os.path.join(cfg.output_dir, "finetune.ckpt")
        save_checkpoint(ckpt, model, step=start_step + len(trace), mode="finetune")
        save_loss_trace(os.path.join(cfg.output_dir, "finetune_loss.csv"), trace)
    print(f"steps={len(trace)} final_loss={trace[-1]:.6f} checkpoint={ckpt}")
    return 0


def _file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_eval(args) -> int:
    cfg = load_experiment_config(args.config)
    os.makedirs(cfg.output_dir, exist_ok=True)
    with OutputLock(cfg.output_dir):
        before = _file_sha256(args.checkpoint)
        model = load_checkpoint(args.checkpoint).model
        images = eval_images(cfg)
        tag = f"mript-{model.config.variant}"
        if args.zero_shot:
            tag += "-zeroshot"
        results = []
        for task in cfg.eval_tasks:
            log(f"eval: task {task.family.value} x{task.acceleration:g} "
                f"over {len(images)} images")
            results += evaluate_model(model, images, task,
                                      seed=cfg.data.seed + _EVAL_SEED_GAP,
                                      tag=tag, error_map_dir=cfg.output_dir)
        report = aggregate_report(results)
        csv_text = emit_csv(report)
        with open(os.path.join(cfg.output_dir, "metrics.csv"), "w",
                  encoding="utf-8", newline="") as f:
            f.write(csv_text)
        with open(os.path.join(cfg.output_dir, "report.md"), "w",
                  encoding="utf-8", newline="") as f:
            f.write(emit_markdown(report))
        after = _file_sha256(args.checkpoint)
        if before != after:
            log("eval: checkpoint changed during evaluation")
            return 1
    print(csv_text, end="")
    return 0


def cmd_stability(args) -> int:
    cfg = load_experiment_config(args.config)
    os.makedirs(cfg.output_dir, exist_ok=True)
    sizes = [int(s) for s in args.sizes.split(",") if s]
    if not sizes or any(s < 1 for s in sizes):
        raise SystemExit(f"bad --sizes {args.sizes!r}")
    if args.repeats < 1:
        raise SystemExit("--repeats must be >= 1")
    task = cfg.downstream[0]
    with OutputLock(cfg.output_dir):
        held_out = eval_images(cfg)
        eval_seed = cfg.data.seed + _EVAL_SEED_GAP

        runs: list[tuple[int, int, float, float]] = []
        base_model = load_checkpoint(args.checkpoint).model
        base = evaluate_model(base_model, held_out, task, seed=eval_seed,
                              with_zero_filled=False)
        runs.append((0, 0, mean_psnr(base, "mript"), mean_ssim(base, "mript")))
        log(f"stability: size 0 baseline psnr {runs[0][2]:.3f} dB")

        for size in sizes:
            for rep in range(args.repeats):
                model = load_checkpoint(args.checkpoint).model
                pool_seed = cfg.data.seed + 50000 + rep * 2000 + size
                imgs = phantom_set(size, cfg.model.image_size, pool_seed)
                stream = epoch_stream(imgs, [task],
                                      cfg.train.seed + 31 * rep + size,
                                      cfg.train.finetune_epochs)
                train(model, stream, cfg.train, mode="finetune")
                res = evaluate_model(model, held_out, task, seed=eval_seed,
                                     with_zero_filled=False)
                runs.append((size, rep, mean_psnr(res, "mript"), mean_ssim(res, "mript")))
                log(f"stability: size {size} repeat {rep} "
                    f"psnr {runs[-1][2]:.3f} dB ssim {runs[-1][3]:.4f}")

        detail = "size,repeat,psnr_db,ssim\n" + "".join(
            f"{s},{r},{p:.4f},{m:.6f}\n" for s, r, p, m in runs)
        with open(os.path.join(cfg.output_dir, "stability_runs.csv"), "w",
                  encoding="utf-8", newline="") as f:
            f.write(detail)

        summary_lines = ["size,mean_psnr_db,std_psnr_db,mean_ssim,std_ssim,n_runs"]
        for size in [0] + sizes:
            ps = [p for s, _, p, _ in runs if s == size]
            ms = [m for s, _, _, m in runs if s == size]
            summary_lines.append(
                f"{size},{_mean(ps):.4f},{float(np.std(ps)):.4f},"
                f"{_mean(ms):.6f},{float(np.std(ms)):.6f},{len(ps)}")
        summary = "\n".join(summary_lines) + "\n"
        with open(os.path.join(cfg.output_dir, "stability.csv"), "w",
                  encoding="utf-8", newline="") as f:
            f.write(summary)
    print(summary, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mript",
                                description="Accelerated-MRI reconstruction workbench")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mask-gen", help="generate one undersampling mask")
    m.add_argument("--family", required=True,
                   choices=[f.value for f in MaskFamily])
    m.add_argument("--acc", type=float, required=True, help="acceleration ratio > 1")
    m.add_argument("--size", type=int, default=224, help="square grid side")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--center-fraction", type=float, default=None)
    m.add_argument("--sigma-fraction", type=float, default=1.0 / 6.0)
    m.add_argument("--offset", type=int, default=None)
    m.add_argument("--out", required=True, help="output path stem")
    m.set_defaults(fn=cmd_mask_gen)

    d = sub.add_parser("degrade", help="apply a mask to an image")
    d.add_argument("--image", required=True, help=".png or .mrit input")
    d.add_argument("--mask", required=True, help=".mrit mask raster")
    d.add_argument("--out", required=True, help="output path stem")
    d.add_argument("--normalize", action="store_true",
                   help="min-max normalize the input first")
    d.add_argument("--error-map", default=None, help="optional error-map PNG path")
    d.add_argument("--gain", type=float, default=3.0)
    d.set_defaults(fn=cmd_degrade)

    ph = sub.add_parser("phantoms", help="write a synthetic phantom dataset")
    ph.add_argument("--count", type=int, required=True)
    ph.add_argument("--size", type=int, default=64)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--out-dir", required=True)
    ph.add_argument("--png", action="store_true", help="also write PNG previews")
    ph.set_defaults(fn=cmd_phantoms)

    pt = sub.add_parser("pretrain", help="train on the full task grid")
    pt.add_argument("--config", required=True)
    pt.set_defaults(fn=cmd_pretrain)

    ft = sub.add_parser("finetune", help="adapt a checkpoint to downstream tasks")
    ft.add_argument("--config", required=True)
    ft.add_argument("--checkpoint", required=True)
    ft.set_defaults(fn=cmd_finetune)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--config", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--zero-shot", action="store_true",
                    help="evaluate without any finetuning")
    ev.set_defaults(fn=cmd_eval)

    st = sub.add_parser("stability", help="finetuning-set-size sweep")
    st.add_argument("--config", required=True)
    st.add_argument("--checkpoint", required=True)
    st.add_argument("--sizes", default="10,50,200")
    st.add_argument("--repeats", type=int, default=3)
    st.set_defaults(fn=cmd_stability)
    return p


def main(argv=None) -> int:
    configure_threads()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except (OSError, ValueError, FloatingPointError) as e:
        log(f"{args.command}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
