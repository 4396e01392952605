"""Command-line entry points with reproducible run manifests.

Every command resolves its configuration as defaults < config file < flags,
derives all randomness from --seed, and writes a run_manifest.json (config
snapshot, content hashes of outputs, duration) into its output directory.

Exit codes: 0 ok, 2 configuration, 3 data, 4 numeric, 5 I/O.
"""
from __future__ import annotations

import os

# Cap BLAS threads before numpy loads; single-threaded by default so results
# are bit-reproducible regardless of host core count.
_THREADS = os.environ.setdefault("SDK_NUM_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .common import (atomic_write_json, config_hash, rng_for, sha256_file)
from .dataset import (DataError, GeneratorConfig, generate_dataset, load_dataset,
                      load_generator_config, load_mask_png, save_dataset,
                      stack_arrays)
from .model import (ControlEncoderConfig, DenoiserConfig, DualBranchModel,
                    load_checkpoint, save_checkpoint)
from .optim import AdamW
from .sampler import SampleConfig, load_grid, sample_grid
from .schedule import make_linear_schedule, schedule_config, schedule_from_config
from .tensor import NonFiniteError
from .trainer import (Draws, TrainConfig, total_loss_gradcheck, train)
from . import harness, metrics


class ConfigError(Exception):
    """Bad flag/config-file values."""


class NumericError(Exception):
    """A numeric verification failed."""


class ClobberError(OSError):
    """Output directory exists and --force was not given."""


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _pair(text) -> tuple[float, float]:
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        vals = [float(v) for v in str(text).split(",")]
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected lo,hi — got {text!r}")
    return (vals[0], vals[1])


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v != ""]


def _ints(text) -> tuple[int, ...]:
    return tuple(_int_list(text))


# name -> (parser, default, help); flags mirror these keys with - for _
SCHEMAS: dict[str, dict] = {
    "gen-data": {
        "n": (int, 200, "number of pairs"),
        "size": (int, 32, "image side length"),
        "seed": (int, 0, "dataset seed"),
        "axis_range": (_pair, (4.0, 8.0), "lesion semi-axis range"),
        "freq_range": (_pair, (5.5, 6.5), "lesion texture frequency range"),
        "contrast_range": (_pair, (0.25, 0.4), "lesion mean-contrast range"),
        "noise_sigma": (float, 0.02, "additive Gaussian noise sigma"),
        "bg_amp": (float, 0.1, "background gradient amplitude"),
    },
    "train": {
        "profile": (str, "desk", "desk or paper-faithful"),
        "mode": (str, "siamese", "siamese, controlnet, or detached"),
        "iters": (int, 3000, "training iterations"),
        "batch": (int, 4, "batch size"),
        "seed": (int, 0, "training seed"),
        "wm": (float, 1.0, "mask-control weight"),
        "wc": (float, 1.0, "consistency-loss weight"),
        "k_tau": (int, None, "augmentation iteration threshold"),
        "t_tau": (int, None, "augmentation timestep threshold"),
        "lr": (float, None, "learning rate (profile default if unset)"),
        "weight_decay": (float, 1e-2, "AdamW weight decay"),
        "p_drop": (float, 0.05, "mask-control dropout probability"),
        "T": (int, None, "diffusion steps (profile default if unset)"),
        "beta_start": (float, 1e-4, "schedule start"),
        "beta_end": (float, 0.02, "schedule end"),
        "base_width": (int, 8, "denoiser base width"),
        "depth": (int, 2, "down/up stages"),
        "time_embed_dim": (int, 32, "timestep embedding width"),
        "injection": (str, "decoder_stage", "decoder_stage or skip"),
        "stage_channels": (_ints, (8, 16, 32), "control encoder widths"),
        "blocks_per_stage": (int, 2, "control residual blocks per stage"),
        "reuse_eps_in_aug": (_bool, True, "reuse the loss noise when re-noising"),
        "online_aug": (_bool, True, "enable the augmentation term"),
    },
    "sample": {
        "steps": (int, 50, "sampling steps"),
        "guidance": (float, 9.0, "classifier-free guidance scale"),
        "seed": (int, 0, "base sampling seed"),
        "seeds": (int, 1, "samples per mask"),
        "n_masks": (int, None, "cap on number of masks"),
    },
    "eval": {
        "metrics": (str, "frechet,kid,diversity,texture", "comma list"),
    },
    "seg-bench": {
        "seeds": (_int_list, [0, 1, 2], "segmenter seeds"),
        "iterations": (int, 400, "segmenter training iterations"),
        "lr": (float, 5e-3, "segmenter learning rate"),
        "width": (int, 12, "segmenter width"),
    },
    "ablate": {
        "iters": (int, 300, "training iterations per cell"),
        "seed": (int, 0, "per-cell seed"),
        "n_sample": (int, 8, "masks sampled per cell"),
        "steps": (int, 20, "sampling steps per image"),
        "guidance": (float, 2.0, "guidance during cell scoring"),
    },
    "gradcheck": {
        "tol": (float, 1e-5, "max relative error"),
        "fraction": (float, 0.01, "fraction of trainable elements checked"),
        "seed": (int, 0, "model/batch seed"),
        "size": (int, 32, "image size for the probe model"),
    },
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualdiff")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(cmd, *, data=False, out=True, extra=()):
        p = sub.add_parser(cmd)
        for name, (typ, default, help_text) in SCHEMAS.get(cmd, {}).items():
            p.add_argument(_flag(name), dest=name, type=typ, default=None,
                           help=f"{help_text} (default {default})")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        for flag, required, help_text in extra:
            p.add_argument(flag, required=required, help=help_text)
        if out:
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--force", action="store_true",
                           help="allow writing into a non-empty directory")
        p.add_argument("--configfile", dest="configfile", default=None,
                       metavar="CONFIG", help="JSON config file")
        return p

    add("gen-data")
    add("train", data=True)
    add("sample", extra=(("--ckpt", True, "checkpoint path"),
                         ("--masks", True, "mask source directory")))
    add("eval", extra=(("--real", True, "real dataset directory"),
                       ("--synth", True, "synthetic dataset or grid directory")))
    add("seg-bench", extra=(("--real", True, "real training dataset"),
                            ("--synth", True, "synthetic dataset or grid"),
                            ("--test", True, "held-out test dataset")))
    add("ablate", data=True)
    add("gradcheck", out=False)
    rp = sub.add_parser("replay")
    rp.add_argument("--manifest", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--force", action="store_true")
    return parser


def resolve_config(cmd: str, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags, with schema validation."""
    schema = SCHEMAS[cmd]
    cfg = {name: default for name, (_, default, _h) in schema.items()}
    path = getattr(args, "configfile", None)
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a JSON object")
        for key, value in raw.items():
            if key not in schema:
                raise ConfigError(
                    f"unknown config key {key!r} for {cmd} "
                    f"(known: {', '.join(sorted(schema))})")
            typ = schema[key][0]
            try:
                cfg[key] = typ(value) if value is not None else None
            except (TypeError, ValueError, argparse.ArgumentTypeError) as e:
                raise ConfigError(f"config key {key!r}: {e}") from e
    for name in schema:
        value = getattr(args, name, None)
        if value is not None:
            cfg[name] = value
    return cfg


# --------------------------------------------------------------------------
# Run manifests
# --------------------------------------------------------------------------


def _prepare_out(out_dir: str, force: bool) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ClobberError(
            f"output directory {out} is not empty; pass --force to reuse it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, argv: list[str], cfg: dict,
                    inputs: dict, started: float) -> None:
    outputs = {}
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != "run_manifest.json":
            outputs[str(path.relative_to(out))] = sha256_file(path)
    manifest = {
        "command": command,
        "argv": argv,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed"),
        "version": __version__,
        "inputs": inputs,
        "outputs": outputs,
        "duration_sec": time.time() - started,
    }
    atomic_write_json(out / "run_manifest.json", manifest)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def _generator_config(cfg: dict) -> GeneratorConfig:
    return GeneratorConfig(size=cfg["size"], axis_range=cfg["axis_range"],
                           freq_range=cfg["freq_range"],
                           contrast_range=cfg["contrast_range"],
                           noise_sigma=cfg["noise_sigma"], bg_amp=cfg["bg_amp"])


def cmd_gen_data(cfg: dict, out: Path) -> None:
    gcfg = _generator_config(cfg)
    samples = generate_dataset(cfg["n"], gcfg, cfg["seed"])
    for s in samples:
        s.validate(gcfg.min_area)
    save_dataset(out, samples, gcfg)


PROFILES = {
    "desk": {"T": 200, "lr": 1e-3},
    "paper-faithful": {"T": 1000, "lr": 1e-5},
}


def _train_configs(cfg: dict):
    if cfg["profile"] not in PROFILES:
        raise ConfigError(f"unknown profile {cfg['profile']!r}")
    prof = PROFILES[cfg["profile"]]
    T = cfg["T"] or prof["T"]
    lr = cfg["lr"] if cfg["lr"] is not None else prof["lr"]
    if cfg["mode"] not in ("siamese", "controlnet", "detached"):
        raise ConfigError(f"unknown mode {cfg['mode']!r}")
    try:
        dcfg = DenoiserConfig(image_size=cfg.get("image_size", 32),
                              base_width=cfg["base_width"], depth=cfg["depth"],
                              time_embed_dim=cfg["time_embed_dim"],
                              injection=cfg["injection"])
        ctrl = ControlEncoderConfig(stage_channels=cfg["stage_channels"],
                                    blocks_per_stage=cfg["blocks_per_stage"])
        tcfg = TrainConfig(
            n_iter=cfg["iters"], batch_size=cfg["batch"], w_m=cfg["wm"],
            w_c=cfg["wc"], k_tau=cfg["k_tau"], t_tau=cfg["t_tau"], lr=lr,
            weight_decay=cfg["weight_decay"], p_drop=cfg["p_drop"],
            seed=cfg["seed"], online_aug=cfg["online_aug"],
            reuse_eps_in_aug=cfg["reuse_eps_in_aug"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if cfg["mode"] == "controlnet":
        tcfg, ctrl = harness.controlnet_mode_config(tcfg, ctrl)
    elif cfg["mode"] == "detached":
        tcfg = replace(tcfg, image_branch_gradients="detached")
    return tcfg, dcfg, ctrl, schedule_config(T, cfg["beta_start"], cfg["beta_end"])


def cmd_train(cfg: dict, out: Path, data_dir: str) -> None:
    samples = load_dataset(data_dir)
    images, masks = stack_arrays(samples)
    size = images.shape[-1]
    cfg = dict(cfg)
    cfg["image_size"] = size
    tcfg, dcfg, ctrl, sched_cfg = _train_configs(cfg)
    s = schedule_from_config(sched_cfg)
    model = DualBranchModel(dcfg, ctrl, seed=tcfg.seed)
    train(model, s, images, masks, tcfg, out_dir=out, schedule_cfg=sched_cfg)


def _mask_paths(masks_dir: str) -> list[Path]:
    root = Path(masks_dir)
    if (root / "masks").is_dir():
        root = root / "masks"
    paths = sorted(root.glob("*.png"))
    if not paths:
        raise DataError(f"no mask PNGs under {masks_dir}")
    return paths


def cmd_sample(cfg: dict, out: Path, ckpt: str, masks_dir: str) -> None:
    model, sched_cfg, _header, _blob = load_checkpoint(ckpt)
    s = schedule_from_config(sched_cfg)
    paths = _mask_paths(masks_dir)
    if cfg["n_masks"]:
        paths = paths[: cfg["n_masks"]]
    masks = [load_mask_png(p) for p in paths]
    scfg = SampleConfig(steps=cfg["steps"], guidance=cfg["guidance"],
                        seed=cfg["seed"])
    sample_grid(model, masks, scfg, s, out, seeds_per_mask=cfg["seeds"],
                mask_names=[p.name for p in paths])


def _load_synth(synth_dir: str):
    root = Path(synth_dir)
    if (root / "grid_manifest.json").exists():
        _manifest, images, masks = load_grid(root)
        return images, masks
    samples = load_dataset(root)
    return [s.image for s in samples], [s.mask for s in samples]


def cmd_eval(cfg: dict, out: Path, real_dir: str, synth_dir: str) -> None:
    real = load_dataset(real_dir)
    synth_images, synth_masks = _load_synth(synth_dir)
    wanted = [m.strip() for m in cfg["metrics"].split(",") if m.strip()]
    known = {"frechet", "kid", "diversity", "texture"}
    unknown = set(wanted) - known
    if unknown:
        raise ConfigError(f"unknown metrics: {', '.join(sorted(unknown))}")
    real_feats = metrics.feature_matrix([s.image for s in real],
                                        [s.mask for s in real])
    synth_feats = metrics.feature_matrix(synth_images, synth_masks)
    report: dict = {"n_real": len(real), "n_synth": len(synth_images)}
    if "frechet" in wanted:
        report["frechet"] = metrics.frechet_distance(real_feats, synth_feats)
    if "kid" in wanted:
        report["kid"] = metrics.kid(real_feats, synth_feats)
    if "diversity" in wanted:
        report["diversity_synth"] = metrics.diversity(synth_feats)
        report["diversity_real"] = metrics.diversity(real_feats)
    if "texture" in wanted:
        gcfg = load_generator_config(real_dir) or GeneratorConfig(
            size=real[0].image.shape[-1])
        errs = [metrics.texture_fidelity(im, mk, gcfg)
                for im, mk in zip(synth_images, synth_masks)]
        report["texture_fidelity_mean"] = float(np.mean(errs))
        report["texture_fidelity"] = [float(e) for e in errs]
    atomic_write_json(out / "eval_report.json", report)


def cmd_seg_bench(cfg: dict, out: Path, real_dir: str, synth_dir: str,
                  test_dir: str) -> None:
    from .dataset import PairedSample

    real = load_dataset(real_dir)
    test = load_dataset(test_dir)
    synth_images, synth_masks = _load_synth(synth_dir)
    synth = [PairedSample(image=i, mask=m) for i, m in
             zip(synth_images, synth_masks)]
    rows = []
    for seed in cfg["seeds"]:
        scfg = harness.SegmenterConfig(width=cfg["width"], lr=cfg["lr"],
                                       iterations=cfg["iterations"], seed=seed)
        result = harness.downstream_experiment(real, synth, scfg, test)
        for arm, vals in result.items():
            rows.append({"seed": seed, "arm": arm, **vals})
    means = {}
    for arm in ("real_only", "copy_paste", "real_synth"):
        sel = [r for r in rows if r["arm"] == arm]
        means[arm] = {"dice": float(np.mean([r["dice"] for r in sel])),
                      "iou": float(np.mean([r["iou"] for r in sel]))}
    atomic_write_json(out / "seg_bench.json", {"rows": rows, "means": means})
    import csv as _csv
    with open(out / "seg_bench.csv", "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["seed", "arm", "dice", "iou", "n_train"])
        for r in rows:
            w.writerow([r["seed"], r["arm"], repr(r["dice"]), repr(r["iou"]),
                        r["n_train"]])


def cmd_ablate(cfg: dict, out: Path, data_dir: str) -> None:
    real = load_dataset(data_dir)
    gcfg = load_generator_config(data_dir) or GeneratorConfig(
        size=real[0].image.shape[-1])
    size = real[0].image.shape[-1]
    dcfg = DenoiserConfig(image_size=size)
    ctrl = ControlEncoderConfig()
    sched_cfg = schedule_config(200, 1e-4, 0.02)
    s = schedule_from_config(sched_cfg)
    base = TrainConfig(n_iter=cfg["iters"], seed=cfg["seed"])
    scfg = SampleConfig(steps=cfg["steps"], guidance=cfg["guidance"])
    harness.run_ablation(real, s, dcfg, ctrl, base, scfg, gcfg, out,
                         n_sample_masks=cfg["n_sample"])


def cmd_gradcheck(cfg: dict) -> None:
    from .dataset import generate_dataset as gen

    size = cfg["size"]
    gcfg = GeneratorConfig(size=size)
    samples = gen(2, gcfg, cfg["seed"])
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    s = make_linear_schedule(200, 1e-4, 0.02)
    tcfg = TrainConfig(n_iter=3000, batch_size=2, seed=cfg["seed"], p_drop=0.0)
    model = DualBranchModel(DenoiserConfig(image_size=size),
                            ControlEncoderConfig(), seed=cfg["seed"])
    rng = rng_for(cfg["seed"], "gradcheck_draws")
    k = tcfg.resolved_k_tau() + 1
    t_tau = tcfg.resolved_t_tau(s.T)
    draws = Draws(
        t=rng.integers(0, t_tau, size=2),
        eps=rng.standard_normal(images.shape),
        drop=np.zeros(2, dtype=bool),
        eps_aug=None)
    draws.eps_aug = draws.eps
    max_rel, n_checked = total_loss_gradcheck(
        model, s, images, masks, k, tcfg, draws,
        fraction=cfg["fraction"], seed=cfg["seed"])
    print(f"gradcheck: {n_checked} elements, max relative error {max_rel:.3e} "
          f"(tol {cfg['tol']:.1e})")
    if max_rel >= cfg["tol"]:
        raise NumericError(
            f"gradient check failed: {max_rel:.3e} >= {cfg['tol']:.1e}")


def cmd_replay(manifest_path: str, out_dir: str, force: bool) -> None:
    manifest = json.loads(Path(manifest_path).read_text())
    argv = list(manifest["argv"])
    if "--out" not in argv:
        raise ConfigError("manifest has no --out to rewrite")
    argv[argv.index("--out") + 1] = out_dir
    if force and "--force" not in argv:
        argv.append("--force")
    code = main(argv)
    if code != 0:
        raise NumericError(f"replayed command exited with {code}")
    replayed = json.loads((Path(out_dir) / "run_manifest.json").read_text())
    if replayed["outputs"] != manifest["outputs"]:
        diff = set(replayed["outputs"].items()) ^ set(manifest["outputs"].items())
        raise NumericError(f"replay outputs differ from manifest: {sorted(diff)[:4]}")
    print(f"replay ok: {len(replayed['outputs'])} outputs match")


# --------------------------------------------------------------------------
# Dispatch
# --------------------------------------------------------------------------


def _dispatch(args: argparse.Namespace, argv: list[str]) -> None:
    cmd = args.command
    if cmd == "replay":
        cmd_replay(args.manifest, args.out, args.force)
        return
    cfg = resolve_config(cmd, args)
    started = time.time()
    inputs = {}
    for attr in ("data", "ckpt", "masks", "real", "synth", "test"):
        value = getattr(args, attr, None)
        if value is not None:
            inputs[attr] = str(value)
    if cmd == "gradcheck":
        cmd_gradcheck(cfg)
        return
    out = _prepare_out(args.out, args.force)
    if cmd == "gen-data":
        cmd_gen_data(cfg, out)
    elif cmd == "train":
        cmd_train(cfg, out, args.data)
    elif cmd == "sample":
        cmd_sample(cfg, out, args.ckpt, args.masks)
    elif cmd == "eval":
        cmd_eval(cfg, out, args.real, args.synth)
    elif cmd == "seg-bench":
        cmd_seg_bench(cfg, out, args.real, args.synth, args.test)
    elif cmd == "ablate":
        cmd_ablate(cfg, out, args.data)
    else:  # pragma: no cover
        raise ConfigError(f"unknown command {cmd!r}")
    _write_manifest(out, cmd, argv, cfg, inputs, started)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        _dispatch(args, argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericError, NonFiniteError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
