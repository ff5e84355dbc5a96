"""drive-constraints command line.

Every subcommand reads and writes inside one run directory (``--out``) and
refreshes its ``manifest.json`` afterwards:

    drive-constraints gen-data --out runs/demo --vehicles 12 --seed 7
    drive-constraints train-vae --out runs/demo
    drive-constraints train-constraint --out runs/demo
    drive-constraints evaluate --out runs/demo
    drive-constraints plan --out runs/demo --instance v3-f120 --no-constraint
    drive-constraints render --out runs/demo --instance v3-f120

Exit codes: 0 on success, 1 when a value or the numerics are bad, 2 when a
prerequisite file is missing.
"""

from __future__ import annotations

import argparse
import errno
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import config
from .constraint import (
    context_from_instance,
    drivable_region,
    load_constraint,
    save_constraint,
)
from .dataset import (
    assign_splits,
    generate_synthetic,
    ingest_ngsim,
    load_instances,
    save_instances,
    select_split,
)
from .density import build_vae, calibrate_threshold, load_vae, save_vae, train_vae
from .evaluate import (
    evaluate,
    perturbation_study,
    plot_drivable,
    render_reconstruction,
    render_report,
)
from .inference import run_inference
from .ogm import instance_pairs, render_pgm
from .planner import plan, write_trace
from .scene import RoadSpec

DATASET = "dataset.jsonl"
VAE = "vae.ckpt"
VAE_LOG = "vae_log.csv"
CONSTRAINT = "constraint.ckpt"
INFERENCE_DIR = "inference"
MANIFEST = "manifest.json"
DRIVABLE_SAMPLES = (33, 9)  # longitudinal x lateral offsets per map


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(errno.ENOENT, "missing prerequisite", str(path))
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _split(instances, name: str):
    picked = select_split(instances, name)
    if not picked:
        raise ValueError(f"the dataset has no {name!r} instances")
    return picked


def _instance(instances, instance_id: str | None, default_split: str = "eval"):
    if instance_id is None:
        return _split(instances, default_split)[0]
    for inst in instances:
        if inst.id == instance_id:
            return inst
    raise ValueError(f"no instance {instance_id!r} in the dataset")


def _pairs(instances, grid, values) -> np.ndarray:
    return np.concatenate(
        [
            instance_pairs(inst, grid, values["window_s"], values["pair_stride"])[0]
            for inst in instances
        ]
    )


# --- subcommands: each returns (written paths, input paths) ---


def cmd_gen_data(args, values):
    instances = generate_synthetic(config.synth_config(values), values["seed"])
    instances = assign_splits(instances, values["seed"])
    path = save_instances(instances, args.out / DATASET)
    counts = {s: len(select_split(instances, s)) for s in ("train", "calib", "eval")}
    print(
        f"{len(instances)} instances  (train {counts['train']}, "
        f"calib {counts['calib']}, eval {counts['eval']})"
    )
    return [path], []


def cmd_ingest(args, values):
    csv = _require(Path(args.csv))
    road = RoadSpec(
        values["lanes"], values["lane_width"], values["road_length"], values["speed_limit"]
    )
    t_steps = round(values["horizon_s"] / values["dt"])
    instances = ingest_ngsim(csv, road, t_steps, values["stride"], values["dt"])
    instances = assign_splits(instances, values["seed"])
    path = save_instances(instances, args.out / DATASET)
    print(f"{len(instances)} instances from {csv.name}")
    return [path], [csv]


def cmd_train_vae(args, values):
    data = _require(args.out / DATASET)
    instances = load_instances(data)
    grid = config.grid_spec(values["grid"])
    x = _pairs(_split(instances, "train"), grid, values)
    held_out = _pairs(_split(instances, "calib"), grid, values)
    print(f"training VAE on {len(x)} pairs, calibrating on {len(held_out)}")
    vae = build_vae(
        grid.pair_shape,
        values["latent_dim"],
        values["hidden"],
        values["backbone"],
        values["seed"],
    )
    vae, log = train_vae(
        vae,
        x,
        values["vae_epochs"],
        config.beta_schedule(values),
        values["seed"],
        values["vae_batch"],
        values["vae_lr"],
        verbose=True,
    )
    threshold = calibrate_threshold(vae, held_out, values["calibration_quantile"])
    print(f"e_th = {threshold.e_th:.5f} at quantile {threshold.calibration_quantile}")
    ckpt = save_vae(args.out / VAE, vae, threshold)
    log_path = args.out / VAE_LOG
    log.to_csv(log_path, index=False)
    return [Path(ckpt), log_path], [data]


def cmd_train_constraint(args, values):
    data = _require(args.out / DATASET)
    vae_path = _require(args.out / VAE)
    vae, threshold = load_vae(vae_path)
    if threshold is None:
        raise ValueError(f"{vae_path} carries no calibrated threshold")
    train = _split(load_instances(data), "train")
    run_dir = config.run_directory(args.out / INFERENCE_DIR, values)
    model, reports = run_inference(
        train,
        vae,
        threshold,
        config.inference_config(values, gap_m=values["gap_m"]),
        config.sampling_spec(values),
        config.grid_spec(values["grid"]),
        run_dir=run_dir,
        verbose=True,
    )
    last = reports[-1]
    print(
        f"stopped after epoch {last.epoch}"
        + (" (converged)" if last.converged else "")
        + f"; {last.planner_pool} constrained planner pairs learned"
    )
    ckpt = save_constraint(args.out / CONSTRAINT, model)
    written = sorted(run_dir.iterdir()) + [Path(ckpt)]
    return written, [data, vae_path]


def _load_model(args, values):
    path = _require(args.out / CONSTRAINT)
    model = load_constraint(path)
    model.decision_threshold = values["decision_threshold"]
    return model, path


def cmd_plan(args, values):
    data = _require(args.out / DATASET)
    inst = _instance(load_instances(data), args.instance)
    inputs = [data]
    model = None
    if not args.no_constraint:
        model, path = _load_model(args, values)
        inputs.append(path)
    result = plan(
        inst,
        model,
        config.sampling_spec(values),
        config.grid_spec(values["grid"]),
        values["window_s"],
    )
    n = len(result.records)
    if result.no_solution:
        print(f"{inst.id}: NoSolution (0/{n} candidates feasible)")
    else:
        c = result.chosen.candidate
        print(
            f"{inst.id}: target_lateral {c.target_lateral:.3f} m  target_speed "
            f"{c.target_speed:.2f} m/s  cost {result.chosen.cost:.5f}  "
            f"({result.feasible_count}/{n} feasible)"
        )
    written = []
    if args.trace:
        written.append(write_trace(result, args.out / f"trace_{inst.id}.csv"))
    return written, inputs


def cmd_evaluate(args, values):
    data = _require(args.out / DATASET)
    model, model_path = _load_model(args, values)
    grid = config.grid_spec(values["grid"])
    instances = _split(load_instances(data), "eval")
    report = evaluate(
        instances,
        model,
        config.sampling_spec(values),
        grid,
        values["window_s"],
        threads=values["threads"],
        verbose=True,
    )
    lat_cov, long_cov = grid.coverage
    long_offsets = np.linspace(-long_cov / 4, long_cov / 4, DRIVABLE_SAMPLES[0])
    lat_offsets = np.linspace(-lat_cov / 4, lat_cov / 4, DRIVABLE_SAMPLES[1])
    drivable, written = {}, []
    for inst in instances[: values["drivable_count"]]:
        mask = drivable_region(
            model,
            context_from_instance(inst),
            long_offsets,
            lat_offsets,
            grid,
            values["window_s"],
            inst.dt,
        )
        drivable[inst.id] = mask
        written.append(
            plot_drivable(
                mask,
                long_offsets,
                lat_offsets,
                args.out / f"drivable_{inst.id}.png",
                f"Drivable region, {inst.id}",
            )
        )
    written = render_report(report, args.out, drivable) + written
    print()
    print((args.out / "eval_report.txt").read_text(encoding="utf-8"))

    inputs = [data, model_path]
    vae_path = args.out / VAE
    if vae_path.exists():
        vae, _ = load_vae(vae_path)
        inputs.append(vae_path)
        try:
            study = perturbation_study(
                vae,
                instances,
                values["perturb_shift"],
                grid,
                values["window_s"],
                values["pair_stride"],
            )
        except ValueError as exc:
            print(f"perturbation study skipped: {exc}")
        else:
            print(
                f"leader pulled to {values['perturb_shift']} m ahead: mean "
                f"error {study.mean_error_in:.5f} -> {study.mean_error_perturbed:.5f} "
                f"(x{study.ratio:.2f}, {study.used} used, {study.skipped} skipped)"
            )
    return written, inputs


def cmd_render(args, values):
    data = _require(args.out / DATASET)
    inst = _instance(load_instances(data), args.instance)
    grid = config.grid_spec(values["grid"])
    images, steps = instance_pairs(inst, grid, values["window_s"])
    out_dir = args.out / "render"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = render_pgm(images[0], out_dir / f"{inst.id}_t{steps[0]}.pgm")
    inputs = [data]
    vae_path = args.out / VAE
    if vae_path.exists():
        vae, _ = load_vae(vae_path)
        written += render_reconstruction(vae, images[0], out_dir, inst.id)
        inputs.append(vae_path)
    return written, inputs


# --- manifest ---


def _key(path: Path, out: Path) -> str:
    try:
        return path.resolve().relative_to(out.resolve()).as_posix()
    except ValueError:
        return path.name


def write_manifest(out: Path, command: str, values: dict, inputs) -> Path:
    """Record config hash, seed and content hashes of inputs and of every file
    in the run directory. Sorted keys, no timestamps."""
    path = out / MANIFEST
    manifest = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    manifest.setdefault("commands", {})[command] = {
        "config_hash": config.config_hash(values),
        "seed": values["seed"],
        "inputs": {_key(p, out): _sha256(p) for p in inputs},
    }
    manifest["outputs"] = {
        p.relative_to(out).as_posix(): _sha256(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p != path
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --- argument parsing ---


def _common(p):
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed")
    p.add_argument("--threads")
    p.add_argument("--grid", choices=("desk", "full"))
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drive-constraints",
        description="Learn driving constraints from demonstrations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate synthetic expert traffic")
    _common(p)
    p.add_argument("--lanes")
    p.add_argument("--vehicles")
    p.add_argument("--duration")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("ingest", help="slice an NGSIM-format CSV into instances")
    _common(p)
    p.add_argument("--csv", required=True)
    p.add_argument("--lanes")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("train-vae", help="train and calibrate the density model")
    _common(p)
    p.add_argument("--epochs", dest="vae_epochs")
    p.add_argument("--backbone", choices=("mlp", "conv"))
    p.set_defaults(handler=cmd_train_vae)

    p = sub.add_parser("train-constraint", help="run constraint inference")
    _common(p)
    p.add_argument("--max-epochs", dest="max_epochs")
    p.add_argument(
        "--freeze-backbone", dest="freeze_backbone", action="store_const", const="true"
    )
    p.set_defaults(handler=cmd_train_constraint)

    p = sub.add_parser("plan", help="plan one instance")
    _common(p)
    p.add_argument("--instance", required=True)
    p.add_argument("--no-constraint", action="store_true")
    p.add_argument("--trace", action="store_true", help="write the per-candidate CSV")
    p.add_argument("--decision-threshold", dest="decision_threshold")
    p.set_defaults(handler=cmd_plan)

    p = sub.add_parser("evaluate", help="score the constrained planner on eval instances")
    _common(p)
    p.add_argument("--decision-threshold", dest="decision_threshold")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("render", help="write PGM renderings of one instance")
    _common(p)
    p.add_argument("--instance")
    p.set_defaults(handler=cmd_render)
    return parser


def resolve(args, env=None) -> dict:
    file_values = config.read_kv_file(_require(args.config)) if args.config else {}
    flags = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        flags[key.strip()] = value
    for key in config.SCHEMA:
        if getattr(args, key, None) is not None:
            flags[key] = getattr(args, key)
    return config.merge(file_values, flags, env)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        values = resolve(args)
        args.out.mkdir(parents=True, exist_ok=True)
        written, inputs = args.handler(args, values)
        written.append(write_manifest(args.out, args.command, values, inputs))
    except FileNotFoundError as exc:
        print(f"error: missing {exc.filename or exc}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(f"Saved: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
