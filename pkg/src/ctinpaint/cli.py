"""Command-line driver: ``datagen``, ``train``, ``inpaint``, ``ablate``, ``eval``.

Each verb owns one output directory below ``paths.out`` and holds an advisory
lock on it while running. Existing output is never replaced without
``--force``; ``train`` instead resumes from a checkpoint it finds there.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import shutil
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .config import FAMILIES, ExperimentConfig, load_config, substream
from .inpaint import InpaintProblem, inpaint, interpolate_baseline
from .io import load_image, save_image, write_pgm
from .metrics import evaluate_set, format_table, write_report_csv
from .projector import build_phantom, forward_project, random_knee_phantom, render_mask, synthetic_masks, \
    trajectory_angles
from .sampler import SamplingError

log = logging.getLogger("ctinpaint")

LOCK_NAME = ".lock"
METHODS = ("score", "interpolation")
# restored pixels are clipped to this range (normalized units); the upper
# bound leaves headroom for test projections brighter than the training max
CLAMP = (0.0, 1.5)


class StageError(RuntimeError):
    """A command could not run or finished with failures."""


# --------------------------------------------------------------------------
# output directories
# --------------------------------------------------------------------------

def _has_output(path: Path) -> bool:
    return path.is_dir() and any(p.name != LOCK_NAME for p in path.iterdir())


@contextmanager
def _owned_dir(path: Path, force: bool, keep_existing: bool = False):
    """Create and lock ``path``; refuse to touch prior output unless forced."""
    path = Path(path)
    if _has_output(path) and not (force or keep_existing):
        raise StageError(f"{path} already holds output; pass --force to replace it")
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise StageError(f"cannot write to {path}: {exc}") from exc
    lock = FileLock(str(path / LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise StageError(f"{path} is locked by another command") from None
    try:
        if force:
            for p in path.iterdir():
                if p.name == LOCK_NAME:
                    continue
                shutil.rmtree(p) if p.is_dir() else p.unlink()
        yield path
    finally:
        lock.release()


def _stems(directory: Path) -> list[str]:
    return sorted(p.stem for p in Path(directory).glob("*.f32"))


def _load_stack(directory: Path, names) -> np.ndarray:
    return np.stack([load_image(Path(directory) / n)[0] for n in names]).astype(np.float64)


def _sha256_tree(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in (LOCK_NAME, "manifest.json"):
            out[p.relative_to(root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_split(cfg: ExperimentConfig) -> dict:
    path = cfg.path("data") / "split.json"
    if not path.exists():
        raise StageError(f"no dataset at {cfg.path('data')}; run datagen first")
    return json.loads(path.read_text())


def _mask_size_range(cfg: ExperimentConfig, kind: str) -> tuple[float, float]:
    lo, hi = cfg.eval.mask_ranges[kind]
    rows = cfg.geometry.detector_px[0]
    return lo * rows / 256.0, hi * rows / 256.0


# --------------------------------------------------------------------------
# datagen
# --------------------------------------------------------------------------

def cmd_datagen(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Project every phantom at every trajectory angle and write masks.

    The last ``phantom.n_test_volumes`` volumes form the test split, so no
    volume contributes to both. Projections are divided by the largest
    training-split value; the factor goes to ``normalization.json``.
    """
    ph, geom = cfg.phantom, cfg.geometry
    angles = trajectory_angles(geom)
    n_test = ph.n_test_volumes
    test_vols = list(range(ph.n_volumes - n_test, ph.n_volumes))
    with _owned_dir(cfg.path("data"), force) as root:
        raw, metal_masks, volume_of = {}, {}, {}
        for v in range(ph.n_volumes):
            spec = random_knee_phantom(substream(cfg.seed, "datagen", "phantom", v), ph.dims, ph.spacing,
                                       ph.n_implants)
            tissue, metal = build_phantom(spec)
            for k, angle in enumerate(angles):
                name = f"v{v:03d}_a{k:03d}"
                raw[name] = forward_project(tissue, geom, angle)
                volume_of[name] = v
                if v in test_vols:
                    metal_masks[name] = render_mask(metal, geom, angle, cfg.eval.metal_threshold)
            log.info("volume %d/%d projected", v + 1, ph.n_volumes)

        train_names = [n for n in raw if volume_of[n] not in test_vols]
        test_names = [n for n in raw if volume_of[n] in test_vols]
        scale = float(max(raw[n].max() for n in train_names))
        if not scale > 0:
            raise StageError("training projections are all zero")
        for name, img in raw.items():
            save_image(root / "projections" / name, img / scale, volume=volume_of[name])

        empty_metal = []
        for name in test_names:
            m = metal_masks[name]
            if m.min() == 1:
                empty_metal.append(name)
                continue
            save_image(root / "masks" / "metal" / name, m)
        for kind in ("circle", "hrect", "vrect"):
            lo, hi = _mask_size_range(cfg, kind)
            for i, name in enumerate(test_names):
                rng = np.random.default_rng(substream(cfg.seed, "datagen", "mask", kind, i))
                size = float(rng.uniform(lo, hi))
                m = synthetic_masks(kind, size, int(rng.integers(2**31)), geom.detector_px)
                save_image(root / "masks" / kind / name, m, size_px=size)

        _write_json(root / "normalization.json", {"scale": scale, "rule": "max over training projections"})
        _write_json(root / "split.json", {
            "train_volumes": [v for v in range(ph.n_volumes) if v not in test_vols],
            "test_volumes": test_vols,
            "train": train_names,
            "test": test_names,
            "metal_empty": empty_metal,
        })
        _write_json(root / "manifest.json", {"config": cfg.to_dict(), "files": _sha256_tree(root)})
        log.info("wrote %d train + %d test projections to %s", len(train_names), len(test_names), root)
    return root


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def _write_loss_csv(path: Path, rows: list[tuple[int, float]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    w.writerows((s, repr(v)) for s, v in rows)
    path.write_text(buf.getvalue())


def _read_loss_csv(path: Path) -> list[tuple[int, float]]:
    if not path.exists():
        return []
    with path.open() as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Train the denoiser on the training split, resuming from a checkpoint if present."""
    import torch

    from .score import DenoiserNet, make_optimizer, save_checkpoint, train, load_checkpoint

    split = _read_split(cfg)
    norm = json.loads((cfg.path("data") / "normalization.json").read_text())
    data = _load_stack(cfg.path("data") / "projections", split["train"])
    opts = cfg.train.options(substream(cfg.seed, "train", "batches"))
    init_seed = substream(cfg.seed, "train", "init")
    torch.use_deterministic_algorithms(True)

    with _owned_dir(cfg.path("checkpoint"), force, keep_existing=True) as root:
        start, optimizer = 0, None
        if (root / "manifest.json").exists():
            net, optimizer, manifest = load_checkpoint(root, opts)
            if manifest["seed"] != init_seed or manifest["architecture"] != cfg.model.to_dict():
                raise StageError(f"checkpoint in {root} was made with a different config; use --force")
            start = int(manifest["step"])
            if start >= opts.steps:
                log.info("checkpoint already at step %d; nothing to do", start)
                return root
            log.info("resuming from step %d", start)
        else:
            net = DenoiserNet(cfg.schedule, cfg.model, init_seed)
        optimizer = optimizer or make_optimizer(net, opts)
        rows = [r for r in _read_loss_csv(root / "loss.csv") if r[0] < start]

        def progress(step, _net):
            if (step + 1) % 250 == 0:
                log.info("step %d/%d", step + 1, opts.steps)

        _, trace = train(net, cfg.schedule, data, opts, optimizer=optimizer, start_step=start, callback=progress)
        rows += list(zip(range(start, opts.steps), trace))
        save_checkpoint(root, net, optimizer, opts.steps, opts, normalization=norm["scale"])
        _write_loss_csv(root / "loss.csv", rows)
    return root


def _load_model(cfg: ExperimentConfig):
    from .score import LearnedScore, load_checkpoint

    root = cfg.path("checkpoint")
    if not (root / "manifest.json").exists():
        raise StageError(f"no checkpoint at {root}; run train first")
    net, _, manifest = load_checkpoint(root)
    return LearnedScore(net), net.sched


# --------------------------------------------------------------------------
# inpaint
# --------------------------------------------------------------------------

def _family_names(cfg: ExperimentConfig, family: str) -> list[str]:
    split = _read_split(cfg)
    have = set(_stems(cfg.path("data") / "masks" / family))
    return [n for n in split["test"] if n in have]


def _inpaint_batch(model, sched, y, m, sampler_cfg, chain_ids, names):
    """Inpaint a batch; on failure retry image by image. Returns (outputs, failed names)."""
    try:
        return inpaint(InpaintProblem(y, m, sched, sampler_cfg, CLAMP), model, chain_ids=chain_ids), []
    except (SamplingError, FloatingPointError) as exc:
        log.warning("batch failed (%s); retrying images one at a time", exc)
    out, failed = np.full_like(y, np.nan), []
    for k in range(len(y)):
        try:
            out[k] = inpaint(InpaintProblem(y[k:k + 1], m[k:k + 1], sched, sampler_cfg, CLAMP), model,
                             chain_ids=chain_ids[k:k + 1])[0]
        except (SamplingError, FloatingPointError) as exc:
            log.error("image %s failed: %s", names[k], exc)
            failed.append(names[k])
    return out, failed


def cmd_inpaint(cfg: ExperimentConfig, families=None, force: bool = False) -> Path:
    """Restore every test projection under each mask family, plus the baseline."""
    families = tuple(families or cfg.eval.families)
    model, sched = _load_model(cfg)
    data = cfg.path("data")
    failed: list[str] = []
    with _owned_dir(cfg.path("inpaint"), force) as root:
        for family in families:
            names = _family_names(cfg, family)
            if not names:
                log.warning("no test images for mask family %s", family)
                continue
            y = _load_stack(data / "projections", names)
            m = _load_stack(data / "masks" / family, names)
            sampler_cfg = cfg.sampler.config(substream(cfg.seed, "sample", family))
            bs = cfg.sampler.batch
            t0 = time.perf_counter()
            for lo in range(0, len(names), bs):
                sl = slice(lo, lo + bs)
                ids = np.arange(len(names))[sl]
                out, bad = _inpaint_batch(model, sched, y[sl], m[sl], sampler_cfg, ids, names[sl])
                failed += [f"{family}/{n}" for n in bad]
                base = interpolate_baseline(y[sl], m[sl])
                for k, name in enumerate(names[sl]):
                    if name not in bad:
                        save_image(root / family / "score" / name, out[k])
                        write_pgm(root / "previews" / family / f"{name}_score.pgm", out[k])
                    save_image(root / family / "interpolation" / name, base[k])
                    write_pgm(root / "previews" / family / f"{name}_interpolation.pgm", base[k])
                    write_pgm(root / "previews" / family / f"{name}_input.pgm", y[sl][k] * m[sl][k])
            log.info("%s: %d images in %.1f s", family, len(names), time.perf_counter() - t0)
        _write_json(root / "manifest.json", {"families": list(families), "failed": failed,
                                             "config": cfg.to_dict(),
                                             "files": _sha256_tree(root)})
    if failed:
        raise StageError(f"{len(failed)} image(s) failed to inpaint: {', '.join(failed[:5])}")
    return root


# --------------------------------------------------------------------------
# ablate
# --------------------------------------------------------------------------

def format_ablation(cells: dict, timing: dict, snrs, steps) -> str:
    """Rows per eta, MAE/PSNR column pair per N, and a seconds-per-image row."""
    width = 18
    head = f"{'':<{width}}" + "".join(f"| {'N=' + str(n):^15}" for n in steps)
    sub = f"{'Metric':<{width}}" + "".join(f"| {'MAE':>6} {'PSNR':>7} " for _ in steps)
    lines = [head, sub, "-" * len(sub)]
    for eta in snrs:
        row = f"{'eta=' + format(eta, '.2f'):<{width}}"
        for n in steps:
            rep = cells.get((eta, n))
            row += f"| {rep[0]:6.4f} {rep[1]:7.2f} " if rep else f"| {'-':>6} {'-':>7} "
        lines.append(row)
    row = f"{'time per image (s)':<{width}}"
    for n in steps:
        row += f"| {timing[n]:^15.3f}" if n in timing else f"| {'-':^15}"
    lines.append(row)
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Metal-mask MAE/PSNR over the eta x N grid and seconds per image per N.

    Timings go to ``timing.csv`` apart from the deterministic ``ablation.csv``.
    Failed cells are written as gaps and make the command fail at the end.
    """
    model, sched = _load_model(cfg)
    s = cfg.sampler
    names = _family_names(cfg, "metal")[: s.ablate_images]
    if not names:
        raise StageError("no metal-mask test images to ablate on")
    y = _load_stack(cfg.path("data") / "projections", names)
    m = _load_stack(cfg.path("data") / "masks" / "metal", names)
    ids = np.arange(len(names))
    cells, seconds, failed = {}, {}, []
    with _owned_dir(cfg.path("ablate"), force) as root:
        for eta in s.ablate_snr:
            for n in s.ablate_steps:
                sampler_cfg = s.config(substream(cfg.seed, "sample", "ablate"), n_steps=n, snr=eta)
                t0 = time.perf_counter()
                try:
                    out = inpaint(InpaintProblem(y, m, sched, sampler_cfg, CLAMP), model, chain_ids=ids)
                except (SamplingError, FloatingPointError) as exc:
                    log.error("cell eta=%g N=%d failed: %s", eta, n, exc)
                    failed.append((eta, n))
                    continue
                seconds.setdefault(n, []).append((time.perf_counter() - t0) / len(names))
                rep = evaluate_set(zip(out, y, m), cfg.eval.peak, names)
                cells[(eta, n)] = (rep.mean_mae, rep.mean_psnr, rep.mean_psnr_masked)
                log.info("eta=%g N=%d  MAE %.4f  PSNR %.2f", eta, n, rep.mean_mae, rep.mean_psnr)

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eta", "n_steps", "mae", "psnr", "psnr_masked"])
        for eta in s.ablate_snr:
            for n in s.ablate_steps:
                c = cells.get((eta, n))
                w.writerow([eta, n] + ([f"{v:.10g}" for v in c] if c else ["", "", ""]))
        (root / "ablation.csv").write_text(buf.getvalue())

        timing = {n: float(np.mean(v)) for n, v in seconds.items()}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n_steps", "seconds_per_image"])
        for n in s.ablate_steps:
            w.writerow([n, f"{timing[n]:.6f}" if n in timing else ""])
        (root / "timing.csv").write_text(buf.getvalue())
        table = format_ablation(cells, timing, s.ablate_snr, s.ablate_steps)
        (root / "table.txt").write_text(table)
        print(table, end="")
    if failed:
        raise StageError(f"{len(failed)} grid cell(s) failed: {failed}")
    return root


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def aligned_names(pred_dir, label_dir, mask_dir) -> list[str]:
    """Filenames shared by the three directories; mismatched sets are rejected."""
    pred, labels, masks = (set(_stems(d)) for d in (pred_dir, label_dir, mask_dir))
    if not pred & labels & masks:
        raise StageError(f"no aligned images between {pred_dir}, {label_dir} and {mask_dir}")
    if pred != masks or not pred <= labels:
        missing = sorted((masks ^ pred) | (pred - labels))
        raise StageError(f"prediction, label and mask filenames differ: {missing[:5]}")
    return sorted(pred)


def _report(pred_dir, label_dir, mask_dir, peak):
    names = aligned_names(pred_dir, label_dir, mask_dir)
    triples = ((load_image(Path(pred_dir) / n)[0], load_image(Path(label_dir) / n)[0],
                load_image(Path(mask_dir) / n)[0]) for n in names)
    return evaluate_set(triples, peak, names)


def cmd_eval(cfg: ExperimentConfig, pred_dir=None, label_dir=None, mask_dir=None, force: bool = False,
             method: str | None = None, family: str | None = None) -> Path:
    """Write ``report.csv`` and ``table.txt`` for every method x mask family.

    With explicit directories a single (method, family) group is evaluated.
    """
    reports = {}
    if pred_dir is not None:
        if label_dir is None or mask_dir is None:
            raise StageError("--pred-dir needs --label-dir and --mask-dir")
        key = (method or Path(pred_dir).name, family or Path(mask_dir).name)
        reports[key] = _report(pred_dir, label_dir, mask_dir, cfg.eval.peak)
    else:
        results = cfg.path("inpaint")
        for fam in cfg.eval.families:
            for meth in METHODS:
                pdir = results / fam / meth
                if pdir.is_dir():
                    reports[(meth, fam)] = _report(pdir, cfg.path("data") / "projections",
                                                   cfg.path("data") / "masks" / fam, cfg.eval.peak)
        if not reports:
            raise StageError(f"no inpainting results under {results}")
    with _owned_dir(cfg.path("eval"), force) as root:
        write_report_csv(root / "report.csv", reports)
        table = format_table(reports)
        (root / "table.txt").write_text(table)
        print(table, end="")
    return root


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults built in)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help="override paths.out")
    common.add_argument("--force", action="store_true", help="replace existing output")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ctinpaint", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("config", parents=[common], help="print the effective config")
    sub.add_parser("datagen", parents=[common], help="project phantoms, write masks and split")
    sub.add_parser("train", parents=[common], help="train (or resume) the score model")
    p = sub.add_parser("inpaint", parents=[common], help="inpaint test projections")
    p.add_argument("--family", action="append", choices=FAMILIES,
                   help="mask family (repeatable; default: all in config)")
    sub.add_parser("ablate", parents=[common], help="eta x N sampler grid with timings")
    p = sub.add_parser("eval", parents=[common], help="MAE/PSNR report")
    p.add_argument("--pred-dir")
    p.add_argument("--label-dir")
    p.add_argument("--mask-dir")
    p.add_argument("--method")
    p.add_argument("--family", dest="eval_family")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = cfg.with_overrides(seed=args.seed, out=args.out)
        if args.command == "config":
            print(cfg.dumps(), end="")
        elif args.command == "datagen":
            cmd_datagen(cfg, args.force)
        elif args.command == "train":
            cmd_train(cfg, args.force)
        elif args.command == "inpaint":
            cmd_inpaint(cfg, args.family, args.force)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.force)
        elif args.command == "eval":
            cmd_eval(cfg, args.pred_dir, args.label_dir, args.mask_dir, args.force,
                     args.method, args.eval_family)
    except Exception as exc:  # every failure maps to a nonzero exit
        log.error("%s failed: %s", args.command, exc)
        if args.verbose:
            log.exception("traceback")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
