"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .diffkit import NumericFailure
from .field import ConfigError, HashGridConfig, MlpConfig, load_checkpoint, save_checkpoint
from .io import DataError, read_mesh, read_point_cloud, write_mesh, write_point_cloud
from .metrics import (CONVENTIONS, MetricError, chamfer_l1, chamfer_l2, f_score, metric_record,
                      normal_consistency, point_to_mesh, sample_surface)
from .objective import DegenerateGradient, LossWeights
from .pipelines import FittedField, denoise, fit, reconstruct, upsample, verify_theorem1
from .sampling import Normalization, ObservationSet, synthesize_noisy
from .shapes import SHAPES, make_shape
from .training import TrainConfig, TrainingDiverged, TrainLog
from .transport import ContractViolation

log = logging.getLogger("n2nsdf")

TASKS = ("train", "denoise", "upsample", "reconstruct", "eval", "theorem1", "synth-noise")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration

@dataclasses.dataclass
class NoiseConfig:
    sigma: float = 0.01
    n_observations: int = 200
    points: int = 10_000


@dataclasses.dataclass
class MetricConfig:
    convention: str = "halved"
    tau: float = 0.01
    samples: int = 100_000
    scale: float = 1.0


@dataclasses.dataclass
class Theorem1Config:
    shape: str = "sphere"
    m: int = 200
    sigma: float = 0.03
    n_observations: int = 100
    iters: int = 2000
    lr: float = 0.01


@dataclasses.dataclass
class RunConfig:
    task: str = "train"
    input: list = dataclasses.field(default_factory=list)
    output: str | None = None
    seed: int = 0
    mc_resolution: int = 256
    checkpoint: str | None = None
    reference: str | None = None
    rate: int = 4
    shape: str | None = None
    mesh_format: str = "ply"
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    noise: NoiseConfig = dataclasses.field(default_factory=NoiseConfig)
    metric: MetricConfig = dataclasses.field(default_factory=MetricConfig)
    theorem1: Theorem1Config = dataclasses.field(default_factory=Theorem1Config)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"]["betas"] = list(self.train.betas)
        return d


_NESTED = {
    (RunConfig, "train"): TrainConfig, (RunConfig, "noise"): NoiseConfig,
    (RunConfig, "metric"): MetricConfig, (RunConfig, "theorem1"): Theorem1Config,
    (TrainConfig, "weights"): LossWeights, (TrainConfig, "mlp"): MlpConfig,
    (TrainConfig, "grid"): HashGridConfig,
}


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    if isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return type(default)(value) if isinstance(default, tuple) else value
    return value


def build(cls, data: dict, prefix: str = ""):
    """Dataclass from a JSON object; every error names the offending key."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(data).__name__}")
    obj = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        full = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"{full}: unknown key")
        sub = _NESTED.get((cls, key))
        if sub is not None:
            if value is None:
                setattr(obj, key, None)
            else:
                base = getattr(obj, key)
                built = build(sub, value, full + ".")
                if base is not None and dataclasses.is_dataclass(base):
                    built = dataclasses.replace(base, **{k: getattr(built, k) for k in value})
                setattr(obj, key, built)
            continue
        default = getattr(obj, key)
        if value is None or default is None:
            setattr(obj, key, value)
        else:
            setattr(obj, key, _coerce(value, default, full))
    return obj


def validate(cfg: RunConfig, need_input: bool):
    if cfg.task not in TASKS:
        raise ConfigError(f"task: expected one of {TASKS}, got {cfg.task!r}")
    if need_input and not cfg.input:
        raise ConfigError("input: at least one input path is required")
    for p in cfg.input:
        if not Path(p).is_file():
            raise DataError(f"input: {p}: no such file")
    for key in ("checkpoint", "reference"):
        p = getattr(cfg, key)
        if p is not None and not Path(p).is_file():
            raise DataError(f"{key}: {p}: no such file")
    if cfg.mc_resolution < 8:
        raise ConfigError("mc_resolution: must be >= 8")
    if cfg.noise.sigma < 0:
        raise ConfigError("noise.sigma: must be >= 0")
    if cfg.noise.n_observations < 1:
        raise ConfigError("noise.n_observations: must be >= 1")
    if cfg.metric.convention not in CONVENTIONS:
        raise ConfigError(f"metric.convention: expected one of {CONVENTIONS}")
    if cfg.mesh_format not in ("ply", "obj"):
        raise ConfigError("mesh_format: expected 'ply' or 'obj'")
    if cfg.rate < 1:
        raise ConfigError("rate: must be >= 1")
    try:
        cfg.train.resolved()
    except ConfigError as exc:
        raise ConfigError(f"train.{exc}") from None


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="n2nsdf", description="Signed distance fields learned from noisy point clouds.")
    sub = parser.add_subparsers(dest="task", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override its values")
    common.add_argument("--input", nargs="+", help="input point clouds (.xyz / .ply)")
    common.add_argument("--output", help="output directory")
    common.add_argument("--mode", choices=("mlp", "fast"))
    common.add_argument("--batch", type=int)
    common.add_argument("--iters", type=int)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--sigma", type=float)
    common.add_argument("--n-observations", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--mc-res", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    helps = {
        "train": "fit a field and save the checkpoint and training log",
        "denoise": "pull every input point onto the learned surface",
        "upsample": "perturb a sparse cloud and denoise the copies",
        "reconstruct": "fit a field and extract its zero level set",
        "eval": "compare a point cloud or mesh against a reference",
        "theorem1": "free point-set optimisation against noisy copies",
        "synth-noise": "write noisy copies of a clean cloud or analytic shape",
    }
    subs = {t: sub.add_parser(t, parents=[common], help=helps[t]) for t in TASKS}
    subs["denoise"].add_argument("--checkpoint", help="trained field; trains on the inputs when omitted")
    subs["upsample"].add_argument("--rate", type=int)
    for t in ("reconstruct", "train"):
        subs[t].add_argument("--mesh-format", choices=("ply", "obj"))
    subs["eval"].add_argument("--reference", required=False)
    subs["eval"].add_argument("--convention", choices=CONVENTIONS)
    subs["theorem1"].add_argument("--shape", choices=sorted(SHAPES))
    subs["theorem1"].add_argument("--m", type=int)
    subs["synth-noise"].add_argument("--shape", choices=sorted(SHAPES))
    subs["synth-noise"].add_argument("--points", type=int)
    return parser


def config_from_args(args) -> RunConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise DataError(f"config: {args.config}: no such file") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    cfg = build(RunConfig, data)
    cfg.task = args.task
    t1 = args.task == "theorem1"
    if args.input is not None:
        cfg.input = list(args.input)
    if args.output is not None:
        cfg.output = args.output
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mc_res is not None:
        cfg.mc_resolution = args.mc_res
    if args.mode is not None:
        cfg.train.mode = args.mode
    if args.batch is not None:
        cfg.train.batch = args.batch
    if args.iters is not None:
        if t1:
            cfg.theorem1.iters = args.iters
        else:
            cfg.train.iterations = args.iters
    if args.lam is not None:
        cfg.train.weights = dataclasses.replace(cfg.train.weights, lam=args.lam)
    if args.sigma is not None:
        if t1:
            cfg.theorem1.sigma = args.sigma
        else:
            cfg.noise.sigma = args.sigma
    if args.n_observations is not None:
        if t1:
            cfg.theorem1.n_observations = args.n_observations
        else:
            cfg.noise.n_observations = args.n_observations
    for name in ("checkpoint", "reference", "rate", "mesh_format"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "convention", None):
        cfg.metric.convention = args.convention
    if getattr(args, "shape", None):
        if t1:
            cfg.theorem1.shape = args.shape
        else:
            cfg.shape = args.shape
    if getattr(args, "m", None) is not None:
        cfg.theorem1.m = args.m
    if getattr(args, "points", None) is not None:
        cfg.noise.points = args.points
    cfg.train.seed = cfg.seed
    return cfg


# ---------------------------------------------------------------------------
# tasks

def _outdir(cfg) -> Path:
    if not cfg.output:
        raise ConfigError("output: an output directory is required")
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, default=str))
    return out


def _observations(cfg) -> ObservationSet:
    return ObservationSet.from_clouds([read_point_cloud(p) for p in cfg.input])


def _save_field(field: FittedField, out: Path):
    save_checkpoint(field.params, out / "field.ckpt", extra={"normalization": field.norm.to_dict()})
    field.log.write_csv(out / "log.csv")


def _load_field(path) -> FittedField:
    params, extra = load_checkpoint(path, with_extra=True)
    nd = extra.get("normalization", {"center": [0, 0, 0], "scale": 1.0})
    return FittedField(params, Normalization(np.array(nd["center"], dtype=np.float64), float(nd["scale"])), TrainLog())


def _suffix(path):
    ext = Path(path).suffix.lower()
    return ext if ext in (".xyz", ".ply") else ".ply"


def run_train(cfg):
    out = _outdir(cfg)
    field = fit(_observations(cfg), cfg.train)
    _save_field(field, out)
    print(json.dumps({"checkpoint": str(out / "field.ckpt"), "iterations": len(field.log),
                      "seconds": round(field.seconds, 3)}))


def run_reconstruct(cfg):
    out = _outdir(cfg)
    S = _observations(cfg)
    field = fit(S, cfg.train)
    _save_field(field, out)
    mesh = reconstruct(S, cfg.train, cfg.mc_resolution, field=field)
    path = out / f"mesh.{cfg.mesh_format}"
    write_mesh(mesh, path)
    print(json.dumps({"mesh": str(path), "vertices": len(mesh.vertices), "triangles": len(mesh.triangles),
                      "empty": mesh.empty, "log": str(out / "log.csv")}))


def run_denoise(cfg):
    out = _outdir(cfg)
    clouds = [read_point_cloud(p) for p in cfg.input]
    if cfg.checkpoint:
        field = _load_field(cfg.checkpoint)
    else:
        field = fit(ObservationSet.from_clouds(clouds), cfg.train)
        _save_field(field, out)
    written = []
    for k, (p, cloud) in enumerate(zip(cfg.input, clouds)):
        path = out / f"denoised_{k:03d}{_suffix(p)}"
        write_point_cloud(denoise(cloud, field), path)
        written.append(str(path))
    print(json.dumps({"outputs": written}))


def run_upsample(cfg):
    out = _outdir(cfg)
    if len(cfg.input) != 1:
        raise ConfigError("input: upsample takes exactly one point cloud")
    sparse = read_point_cloud(cfg.input[0])
    dense = upsample(sparse, cfg.rate, cfg.noise.sigma, cfg.train, seed=cfg.seed)
    path = out / f"upsampled{_suffix(cfg.input[0])}"
    write_point_cloud(dense, path)
    print(json.dumps({"output": str(path), "points": len(dense)}))


def _load_geometry(path):
    if Path(path).suffix.lower() == ".obj":
        return read_mesh(path)
    if Path(path).suffix.lower() == ".ply":
        mesh = read_mesh(path)
        return mesh if len(mesh.triangles) else mesh.vertices
    return read_point_cloud(path)


def run_eval(cfg):
    if len(cfg.input) != 1 or not cfg.reference:
        raise ConfigError("input/reference: eval needs one --input and a --reference")
    pred, ref = _load_geometry(cfg.input[0]), _load_geometry(cfg.reference)
    m = cfg.metric
    pred_pts = sample_surface(pred, m.samples, cfg.seed)[0] if not isinstance(pred, np.ndarray) else pred
    ref_pts = sample_surface(ref, m.samples, cfg.seed + 1)[0] if not isinstance(ref, np.ndarray) else ref
    records = [
        metric_record("chamfer_l2", chamfer_l2(pred_pts, ref_pts, m.convention, m.scale), m.convention, m.scale),
        metric_record("chamfer_l1", chamfer_l1(pred_pts, ref_pts, m.convention, m.scale), m.convention, m.scale),
    ]
    if not isinstance(ref, np.ndarray):
        records.append(metric_record("p2m", point_to_mesh(pred_pts, ref)))
        if not isinstance(pred, np.ndarray):
            records.append(metric_record("normal_consistency", normal_consistency(pred, ref, m.samples, cfg.seed)))
            records.append(metric_record("f_score", f_score(pred, ref, m.tau, m.samples, cfg.seed)))
    text = json.dumps(records, indent=2)
    if cfg.output:
        _outdir(cfg).joinpath("metrics.json").write_text(text)
    print(text)


def run_theorem1(cfg):
    t = cfg.theorem1
    report = verify_theorem1(t.shape, t.m, t.sigma, t.n_observations, t.iters, cfg.seed, t.lr)
    solution = report.pop("solution")
    text = json.dumps(report, indent=2)
    if cfg.output:
        out = _outdir(cfg)
        (out / "theorem1.json").write_text(text)
        write_point_cloud(solution, out / "solution.xyz")
    print(text)


def run_synth_noise(cfg):
    out = _outdir(cfg)
    if cfg.input:
        clean = read_point_cloud(cfg.input[0])
    elif cfg.shape:
        clean = make_shape(cfg.shape).sample(cfg.noise.points, cfg.seed)
    else:
        raise ConfigError("input/shape: synth-noise needs --input or --shape")
    # sigma is relative to the cloud's bounding radius
    scale = Normalization.fit([clean]).scale
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.noise.n_observations)
    write_point_cloud(clean, out / "clean.ply")
    for k, s in enumerate(seeds):
        noisy = synthesize_noisy(clean, cfg.noise.sigma * scale, int(s.generate_state(1)[0]))
        write_point_cloud(noisy, out / f"noisy_{k:03d}.ply")
    print(json.dumps({"output": str(out), "observations": cfg.noise.n_observations, "points": len(clean)}))


RUNNERS = {"train": run_train, "denoise": run_denoise, "upsample": run_upsample,
           "reconstruct": run_reconstruct, "eval": run_eval, "theorem1": run_theorem1,
           "synth-noise": run_synth_noise}
NEEDS_INPUT = {"train", "denoise", "upsample", "reconstruct", "eval"}


def cli_main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
        validate(cfg, args.task in NEEDS_INPUT)
        RUNNERS[args.task](cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ContractViolation, MetricError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NumericFailure, DegenerateGradient, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(cli_main())
