"""Command-line entry point wiring the stages together.

Every stage reads and writes files so that ``pipeline`` is exactly the chain
of ``render``, ``init``, ``optimize``, ``mesh`` and ``eval``. Exit codes:
0 on success, 1 on usage errors, 2 on numerical failures. Stage timings go
to stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import quadric
from .decoder import DecoderWeights
from .lie import LieDomainError, Sim3
from .mesh import marching_cubes, read_ply, sdf_grid, transform_mesh, write_obj, write_ply
from .optim import EmptyObservation, ObjectEstimate, OptimConfig, OptimizationDiverged, optimize
from .pipeline import class_code, evaluate_object, flip_score, initialize_from_ellipses, view_ellipses
from .scene import (
    DEFAULT_EPSILON,
    NoiseModel,
    SceneSpec,
    load_views,
    make_scene,
    observe_object,
    read_observations,
    render_views,
    save_views,
    write_observations,
)
from .trainer import ShapeFamily, TrainConfig, TrainingDiverged, generate_corpus, load_corpus, save_corpus, train

log = logging.getLogger("sdfpose")

NUMERICAL_ERRORS = (
    quadric.DegenerateObservation,
    quadric.InsufficientViews,
    quadric.AmbiguousSolution,
    quadric.NonEllipsoid,
    OptimizationDiverged,
    TrainingDiverged,
    LieDomainError,
    EmptyObservation,
    FloatingPointError,
    np.linalg.LinAlgError,
)

INIT_FILE = "init.json"
ESTIMATES_FILE = "estimates.json"
EVAL_FILE = "eval.csv"
VIEWS_DIR = "views"
MESH_DIR = "meshes"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        payload = getattr(record, "payload", None)
        return json.dumps(payload, sort_keys=True) if payload is not None else record.getMessage()


@contextmanager
def stage(name: str, **fields):
    t0 = time.perf_counter()
    yield
    log.info(name, extra={"payload": {"stage": name, "wall_s": round(time.perf_counter() - t0, 4), **fields}})


# ------------------------------------------------------------------ config


def _config_dict(args) -> dict:
    if getattr(args, "config", None) is None:
        return {}
    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"--config: file not found: {path}")
    data = json.loads(path.read_text())
    if not isinstance(data, dict):
        raise UsageError("--config: expected a JSON object")
    return data


def optim_config(args) -> OptimConfig:
    """Defaults < ``--config`` file < command-line flags."""
    d = _config_dict(args)
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "max_iterations", None) is not None:
        d["max_iterations"] = args.max_iterations
    return OptimConfig.from_dict(d)


def train_config(args) -> TrainConfig:
    d = _config_dict(args)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.epochs is not None:
        d["epochs"] = args.epochs
    return TrainConfig.from_dict(d)


def _require(path, flag: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: not found: {p}")
    return p


def _dump(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------------ stages


def run_render(spec: SceneSpec, out_dir: Path, epsilon: float = DEFAULT_EPSILON) -> None:
    with stage("render", views=len(spec.cameras)):
        views = render_views(spec)
        save_views(out_dir, views, spec.intrinsics)
    # observations are sampled from the stored (float32) depth maps so that
    # every later stage sees exactly what a separate invocation would
    intrinsics, views = load_views(out_dir)
    for obj in spec.objects:
        pts = observe_object(views, obj.object_id, epsilon, intrinsics)
        write_observations(out_dir / f"obs_{obj.object_id:03d}.ndjson", pts)


def _object_ids(views_dir: Path) -> list[int]:
    return sorted(int(p.stem.split("_")[1]) for p in views_dir.glob("obs_*.ndjson"))


def _init_one(job):
    views_dir, oid, weights_path, cfg, flip_iterations = job
    intrinsics, views = load_views(views_dir)
    weights = DecoderWeights.load(weights_path)
    pts = read_observations(views_dir / f"obs_{oid:03d}.ndjson")
    t0 = time.perf_counter()
    ellipses, cams = view_ellipses(views, oid, intrinsics)
    score = flip_score(pts, weights, cfg, flip_iterations) if len(pts) and flip_iterations > 0 else None
    init = initialize_from_ellipses(ellipses, cams, weights.coarse_decode(class_code(weights)), score)
    return oid, init, time.perf_counter() - t0


def _init_record(oid, init) -> dict:
    return {
        "id": oid,
        "T": init.world_to_object.to_list(),
        "quadric": [float(v) for v in init.quadric.v],
        "symmetric_axes": [list(g) for g in init.symmetric_axes],
    }


def _map(fn, jobs, n_jobs: int):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, jobs))


def run_init(views_dir: Path, weights_path: Path, cfg: OptimConfig, out_path: Path, jobs: int = 1, flip_iterations: int = 15) -> None:
    ids = _object_ids(views_dir)
    results = _map(_init_one, [(views_dir, oid, weights_path, cfg, flip_iterations) for oid in ids], jobs)
    records = []
    for oid, init, wall in results:
        log.info("init", extra={"payload": {"stage": "init", "object": oid, "wall_s": round(wall, 4)}})
        records.append(_init_record(oid, init))
    _dump(out_path, {"objects": records})


def run_init_from_ellipses(ellipses_path: Path, axes, out_path: Path) -> None:
    """Initialization from explicit per-view dual conics (no masks)."""
    data = json.loads(ellipses_path.read_text())
    ellipses = [quadric.ellipse_from_dual_conic(np.asarray(v["dual_conic"], dtype=float)) for v in data["views"]]
    cams = [quadric.CameraFrame(Sim3.from_list(v["pose"]), v.get("id", k)) for k, v in enumerate(data["views"])]
    axes = axes if axes is not None else data.get("axes")
    if axes is None:
        raise UsageError("--axes: required when the ellipses file has no 'axes' entry")
    with stage("init", object=data.get("id", 0)):
        init = initialize_from_ellipses(ellipses, cams, np.asarray(axes, dtype=float))
    _dump(out_path, {"objects": [_init_record(data.get("id", 0), init)]})


def _optimize_one(job):
    views_dir, rec, weights_path, cfg = job
    weights = DecoderWeights.load(weights_path)
    pts = read_observations(views_dir / f"obs_{rec['id']:03d}.ndjson")
    t0 = time.perf_counter()
    est = optimize(Sim3.from_list(rec["T"]), pts, weights, class_code(weights), cfg)
    return rec["id"], est, time.perf_counter() - t0


def run_optimize(views_dir: Path, init_path: Path, weights_path: Path, cfg: OptimConfig, out_path: Path, jobs: int = 1) -> None:
    inits = sorted(json.loads(init_path.read_text())["objects"], key=lambda r: r["id"])
    results = _map(_optimize_one, [(views_dir, rec, weights_path, cfg) for rec in inits], jobs)
    records = []
    for rec, (oid, est, wall) in zip(inits, results):
        log.info("optimize", extra={"payload": {"stage": "optimize", "object": oid, "wall_s": round(wall, 4), "iterations": est.iterations}})
        records.append({"id": oid, "init": rec["T"], "estimate": est.to_dict()})
    _dump(out_path, {"objects": records})


def _load_estimates(path: Path) -> list[tuple[int, ObjectEstimate]]:
    recs = json.loads(path.read_text())["objects"]
    return sorted(((r["id"], ObjectEstimate.from_dict(r["estimate"])) for r in recs), key=lambda t: t[0])


def run_mesh(estimates_path: Path, weights_path: Path, out_dir: Path, resolution: int = 64) -> None:
    weights = DecoderWeights.load(weights_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    for oid, est in _load_estimates(estimates_path):
        with stage("decoding", object=oid):
            grid = sdf_grid(weights, class_code(weights) + est.delta_z, resolution)
        with stage("meshing", object=oid):
            mesh = transform_mesh(marching_cubes(grid), est.T)
        write_ply(out_dir / f"object_{oid:03d}.ply", mesh)
        write_obj(out_dir / f"object_{oid:03d}.obj", mesh)


EVAL_COLUMNS = ["id", "rot_deg", "trans", "scale_pct", "accurate", "fit_rate", "iou"]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if not math.isfinite(v) else f"{v:.6f}"


def eval_rows(spec: SceneSpec, estimates, meshes: dict, seed: int = 0) -> list[dict]:
    objects = {o.object_id: o for o in spec.objects}
    rows = []
    for oid, est in estimates:
        if oid not in objects:
            raise UsageError(f"--estimates: object {oid} is not in the scene")
        rows.append({"id": oid, **evaluate_object(objects[oid], est.T, meshes.get(oid), seed=seed)})
    return rows


def eval_csv(rows: list[dict]) -> str:
    """Per-object rows plus a ``mean`` row; its ``accurate`` entry is the
    fraction of accurate objects."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in EVAL_COLUMNS])
    if rows:
        summary = ["mean"]
        for c in EVAL_COLUMNS[1:]:
            vals = np.array([float(r[c]) for r in rows])
            vals = vals[np.isfinite(vals)]
            summary.append(_fmt(float(vals.mean())) if len(vals) else "nan")
        w.writerow(summary)
    return buf.getvalue()


def run_eval(scene_path: Path, estimates_path: Path, mesh_dir: Path | None, out_path: Path, seed: int = 0) -> None:
    spec = SceneSpec.load(scene_path)
    estimates = _load_estimates(estimates_path)
    meshes = {}
    for oid, _ in estimates:
        p = mesh_dir / f"object_{oid:03d}.ply" if mesh_dir is not None else None
        if p is not None and p.exists():
            meshes[oid] = read_ply(p)
    with stage("eval", objects=len(estimates)):
        text = eval_csv(eval_rows(spec, estimates, meshes, seed))
    Path(out_path).write_text(text)


# ------------------------------------------------------------------ commands


def cmd_gen_corpus(args):
    seed = 0 if args.seed is None else args.seed
    with stage("gen-corpus", instances=args.instances):
        corpus = generate_corpus(args.instances, ShapeFamily(), seed)
        save_corpus(corpus, args.out)


def cmd_train(args):
    corpus = load_corpus(_require(args.corpus, "--corpus"))
    cfg = train_config(args)
    with stage("train", epochs=cfg.epochs):
        result = train(corpus, cfg)
    result.weights.save(args.out)
    trace = args.trace or str(args.out) + ".trace.csv"
    Path(trace).write_text(result.trace_csv())


def cmd_gen_scene(args):
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    shapes = [ShapeFamily().sample(rng) for _ in range(args.objects)]
    spec = make_scene(
        shapes,
        args.views,
        seed=seed,
        noise=NoiseModel(args.depth_sigma, args.mask_radius),
        floor_height=args.floor_height,
    )
    spec.save(args.out)


def _scene_with_seed(args) -> SceneSpec:
    spec = SceneSpec.load(_require(args.scene, "--scene"))
    return spec if args.seed is None else replace(spec, seed=args.seed)


def cmd_render(args):
    run_render(_scene_with_seed(args), Path(args.out), args.epsilon)


def cmd_init(args):
    if (args.views is None) == (args.ellipses is None):
        raise UsageError("init: give exactly one of --views or --ellipses")
    if args.ellipses is not None:
        run_init_from_ellipses(_require(args.ellipses, "--ellipses"), args.axes, Path(args.out))
        return
    if args.weights is None:
        raise UsageError("--weights: required with --views")
    run_init(
        _require(args.views, "--views"),
        _require(args.weights, "--weights"),
        optim_config(args),
        Path(args.out),
        args.jobs,
        args.flip_iterations,
    )


def cmd_optimize(args):
    run_optimize(
        _require(args.views, "--views"),
        _require(args.init, "--init"),
        _require(args.weights, "--weights"),
        optim_config(args),
        Path(args.out),
        args.jobs,
    )


def cmd_mesh(args):
    run_mesh(_require(args.estimates, "--estimates"), _require(args.weights, "--weights"), Path(args.out), args.resolution)


def cmd_eval(args):
    mesh_dir = _require(args.meshes, "--meshes") if args.meshes else None
    seed = 0 if args.seed is None else args.seed
    run_eval(_require(args.scene, "--scene"), _require(args.estimates, "--estimates"), mesh_dir, Path(args.out), seed)


def cmd_pipeline(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    weights = _require(args.weights, "--weights")
    spec = _scene_with_seed(args)
    cfg = optim_config(args)
    seed = 0 if args.seed is None else args.seed
    views_dir = out / VIEWS_DIR
    run_render(spec, views_dir, args.epsilon)
    run_init(views_dir, weights, cfg, out / INIT_FILE, args.jobs, args.flip_iterations)
    run_optimize(views_dir, out / INIT_FILE, weights, cfg, out / ESTIMATES_FILE, args.jobs)
    run_mesh(out / ESTIMATES_FILE, weights, out / MESH_DIR, args.resolution)
    spec.save(out / "scene.json")
    run_eval(out / "scene.json", out / ESTIMATES_FILE, out / MESH_DIR, out / EVAL_FILE, seed)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random choice of the command")
    common.add_argument("--config", default=None, help="JSON file overriding OptimConfig/TrainConfig fields")
    common.add_argument("--jobs", type=int, default=1, help="objects processed in parallel (output order is by object id)")
    common.add_argument("-v", "--verbose", action="store_true", help="also log debug messages")

    p = _Parser(prog="sdfpose", description="Joint SIM(3) pose and latent-shape estimation from depth and masks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-corpus", parents=[common], help="generate a training corpus of superellipsoids")
    s.add_argument("--out", required=True, help="corpus JSON to write (arrays go to <out>.bin)")
    s.add_argument("--instances", type=int, default=10, help="number of instances")
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("train", parents=[common], help="train the coarse and fine decoders")
    s.add_argument("--corpus", required=True, help="corpus JSON from gen-corpus")
    s.add_argument("--out", required=True, help="weights file to write")
    s.add_argument("--trace", default=None, help="loss trace CSV (default: <out>.trace.csv)")
    s.add_argument("--epochs", type=int, default=None, help="override TrainConfig.epochs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("gen-scene", parents=[common], help="write a random scene description")
    s.add_argument("--out", required=True, help="scene JSON to write")
    s.add_argument("--objects", type=int, default=3, help="number of objects")
    s.add_argument("--views", type=int, default=20, help="number of cameras")
    s.add_argument("--depth-sigma", type=float, default=0.0, help="Gaussian depth noise (m)")
    s.add_argument("--mask-radius", type=int, default=0, help="mask dilation (>0) or erosion (<0) in pixels")
    s.add_argument("--floor-height", type=float, default=None, help="opaque floor plane hiding everything below it")
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("render", parents=[common], help="render depth maps, masks and observations")
    s.add_argument("--scene", required=True, help="scene JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON, help="offset of the labelled points along each ray")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("init", parents=[common], help="ellipse fit, dual quadric solve and pose recovery")
    s.add_argument("--views", default=None, help="render directory")
    s.add_argument("--ellipses", default=None, help="JSON with per-view dual conics and camera poses")
    s.add_argument("--weights", default=None, help="weights file (class ellipsoid and flip scoring)")
    s.add_argument("--axes", type=float, nargs=3, default=None, help="canonical semi-axes for --ellipses")
    s.add_argument("--flip-iterations", type=int, default=15, help="short-optimization length used to pick the axis flip")
    s.add_argument("--out", required=True, help="initialization JSON to write")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("optimize", parents=[common], help="joint pose and shape optimization")
    s.add_argument("--views", required=True, help="render directory")
    s.add_argument("--init", required=True, help="initialization JSON")
    s.add_argument("--weights", required=True, help="weights file")
    s.add_argument("--max-iterations", type=int, default=None, help="override OptimConfig.max_iterations")
    s.add_argument("--out", required=True, help="estimates JSON to write")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("mesh", parents=[common], help="extract world-frame meshes (PLY and OBJ)")
    s.add_argument("--estimates", required=True, help="estimates JSON")
    s.add_argument("--weights", required=True, help="weights file")
    s.add_argument("--resolution", type=int, default=64, help="SDF grid resolution")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("eval", parents=[common], help="pose accuracy, fitting rate and 3D IoU as CSV")
    s.add_argument("--scene", required=True, help="scene JSON with ground truth")
    s.add_argument("--estimates", required=True, help="estimates JSON")
    s.add_argument("--meshes", default=None, help="mesh directory (fit rate and IoU are nan without it)")
    s.add_argument("--out", required=True, help="CSV to write")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", parents=[common], help="render, init, optimize, mesh and eval in one go")
    s.add_argument("--scene", required=True, help="scene JSON")
    s.add_argument("--weights", required=True, help="weights file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON, help="offset of the labelled points along each ray")
    s.add_argument("--flip-iterations", type=int, default=15, help="short-optimization length used to pick the axis flip")
    s.add_argument("--max-iterations", type=int, default=None, help="override OptimConfig.max_iterations")
    s.add_argument("--resolution", type=int, default=64, help="SDF grid resolution")
    s.set_defaults(func=cmd_pipeline)
    return p


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _setup_logging(args.verbose)
        if args.jobs < 1:
            raise UsageError("--jobs: must be at least 1")
        args.func(args)
    except UsageError as e:
        print(f"sdfpose: usage error: {e}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as e:
        print(f"sdfpose: numerical failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        # invalid configuration values and malformed inputs
        print(f"sdfpose: usage error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
