"""Command-line entry point: ``scan``, ``complete``, ``ntk`` and ``eval``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import ntk as N
from . import tape as T
from .grid import GridError, MaskedTsdf, SparseGrid, read_sptsdf, write_sptsdf
from .net import DeepPriorNet, NetworkConfig
from .scansim import FusionConfig, ScanError, normalize_mesh, scan, write_pgm
from .surface import fscore, marching_cubes, read_obj, sample_surface, write_metrics, write_obj
from .trainer import (
    TrainConfig, TrainingError, boundary_grids, derive_seed, init_domain, make_instances, train,
    write_log,
)

log = logging.getLogger("ntkdp")

EXIT_OK, EXIT_USAGE, EXIT_EMPTY, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_DELTA = 0.007  # 0.7% of the unit cube's side


class CliError(Exception):
    def __init__(self, message: str, code: int, outputs: list | None = None):
        super().__init__(message)
        self.code = code
        self.outputs = outputs or []  # files written before the failure


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# --------------------------------------------------------------------------
# argument parsing


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    p.add_argument("--threads", type=_positive_int, default=d(None),
                   help="BLAS thread count (falls back to NTKDP_THREADS)")
    p.add_argument("--out-dir", type=Path, default=d(Path(".")), help="directory for all outputs")
    p.add_argument("--config", type=Path, default=d(None), help="JSON config merged under explicit flags")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntkdp", description="Deep-prior shape completion toolkit.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="synthesize a partial scan from a mesh")
    _global_flags(p, suppress=True)
    p.add_argument("mesh", type=Path)
    p.add_argument("--views", type=_positive_int, default=4)
    p.add_argument("--res", type=_positive_int, default=64)
    p.add_argument("--tau", type=float, default=3.0, help="truncation in voxels")
    p.add_argument("--noise", type=_nonneg_float, default=0.0,
                   help="depth noise sigma relative to the largest bounding-box side")
    p.add_argument("--dump-depth", action="store_true", help="also write PGM depth maps")
    p.add_argument("-o", "--output", default="partial.sptsdf")

    p = sub.add_parser("complete", help="complete a partial TSDF with the deep prior")
    _global_flags(p, suppress=True)
    p.add_argument("partial", type=Path)
    p.add_argument("--epochs", type=_positive_int, default=2000)
    p.add_argument("--interval", type=_positive_int, default=250)
    p.add_argument("--dilations", type=_positive_int, default=4)
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--w1", type=_nonneg_float, default=0.001)
    p.add_argument("--w2", type=_nonneg_float, default=0.1)
    p.add_argument("--lr", type=_positive_float, default=2e-3)
    p.add_argument("--augmentations", type=int, default=23)
    p.add_argument("--no-hierarchy", action="store_true")
    p.add_argument("--no-laplacian", action="store_true")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--net-config", type=Path, default=None, help="network architecture JSON")
    p.add_argument("--dump-dir", type=Path, default=None,
                   help="write SPTSDF and OBJ snapshots at every domain update")

    p = sub.add_parser("ntk", help="tangent-kernel analysis of a trained network")
    _global_flags(p, suppress=True)
    p.add_argument("partial", type=Path)
    p.add_argument("checkpoint", type=Path, nargs="?")
    p.add_argument("--samples", type=_positive_int, default=256)
    p.add_argument("--probe-lr", type=_positive_float, default=1e-4)
    p.add_argument("--probe-samples", type=_positive_int, default=4)
    p.add_argument("--net-config", type=Path, default=None,
                   help="architecture JSON (default: net.json beside the checkpoint)")
    p.add_argument("--analytic-1d", action="store_true", help="run the 1D structure-tensor oracle suite")
    p.add_argument("--specs", type=_positive_int, default=8, help="random specs for --analytic-1d")

    p = sub.add_parser("eval", help="F-score of a reconstruction against ground truth")
    _global_flags(p, suppress=True)
    p.add_argument("completed", type=Path)
    p.add_argument("groundtruth", type=Path)
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--points", type=_positive_int, default=100_000)
    p.add_argument("--no-normalize", action="store_true",
                   help="do not apply the scan-time unit-cube normalization to the ground truth")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_USAGE) from exc
        if not isinstance(cfg, dict):
            raise CliError("config must be a JSON object", EXIT_USAGE)
        # top-level keys apply everywhere, a section named after the command refines them
        merged = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
        merged.update(cfg.get(args.command, {}))
        merged = {k.replace("-", "_"): v for k, v in merged.items()}
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions} | {a.dest for a in parser._actions}
        unknown = sorted(set(merged) - known)
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(unknown)}", EXIT_USAGE)
        top = {a.dest for a in parser._actions}
        parser.set_defaults(**{k: v for k, v in merged.items() if k in top})
        sub.set_defaults(**{k: v for k, v in merged.items() if k not in top})
        args = parser.parse_args(argv)
    return args


def resolve_threads(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get("NTKDP_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise CliError(f"NTKDP_THREADS must be an integer, got {env!r}", EXIT_USAGE) from None
        if n < 1:
            raise CliError("NTKDP_THREADS must be positive", EXIT_USAGE)
        return n
    return None


# --------------------------------------------------------------------------
# manifest


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, inputs: list, outputs: list,
                   started: float, status: str = "ok") -> Path:
    path = out_dir / f"{command}.manifest.json"
    doc = {
        "command": command,
        "status": status,
        "config": _jsonable(config),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": _version(),
        "duration_s": round(time.time() - started, 3),
    }
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def _config_of(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("config",)}


# --------------------------------------------------------------------------
# commands


def _read_mesh(path: Path):
    try:
        mesh = read_obj(path)
    except (OSError, ValueError, IndexError) as exc:
        raise CliError(f"cannot read mesh {path}: {exc}", EXIT_USAGE) from exc
    if not len(mesh.faces):
        raise CliError(f"mesh {path} has no faces", EXIT_USAGE)
    return mesh


def _read_tsdf(path: Path) -> MaskedTsdf:
    try:
        return read_sptsdf(path)
    except (OSError, GridError, ValueError) as exc:
        raise CliError(f"cannot read SPTSDF {path}: {exc}", EXIT_USAGE) from exc


def cmd_scan(args) -> list[Path]:
    if args.tau < 1:
        raise CliError("--tau must be at least one voxel", EXIT_USAGE)
    mesh, _, _ = normalize_mesh(_read_mesh(args.mesh))
    try:
        tsdf, maps, _ = scan(mesh, args.views, args.seed, FusionConfig(args.res, args.tau), args.noise)
    except ScanError as exc:
        raise CliError(str(exc), EXIT_EMPTY) from exc
    out = args.out_dir / args.output
    write_sptsdf(out, tsdf)
    outputs = [out]
    partial_obj = out.with_suffix(".obj")
    write_obj(partial_obj, marching_cubes(tsdf.values))
    outputs.append(partial_obj)
    if args.dump_depth:
        for v, d in enumerate(maps):
            p = args.out_dir / f"depth_{v:02d}.pgm"
            write_pgm(p, d)
            outputs.append(p)
    log.info("scan: |omega|=%d |vacant|=%d", len(tsdf.omega), len(tsdf.vacant))
    return outputs


def _network_config(path: Path | None, hierarchy: bool = True) -> NetworkConfig:
    if path is None:
        return NetworkConfig(hierarchy=hierarchy)
    try:
        cfg = NetworkConfig.load(path)
    except (OSError, ValueError, TypeError) as exc:
        raise CliError(f"cannot read network config {path}: {exc}", EXIT_USAGE) from exc
    if not hierarchy:
        cfg.hierarchy = False
    return cfg


def _write_shape(stem: Path, tsdf: MaskedTsdf) -> list[Path]:
    write_sptsdf(stem.with_suffix(".sptsdf"), tsdf)
    write_obj(stem.with_suffix(".obj"), marching_cubes(tsdf.values))
    return [stem.with_suffix(".sptsdf"), stem.with_suffix(".obj")]


def cmd_complete(args) -> list[Path]:
    partial = _read_tsdf(args.partial)
    try:
        cfg = TrainConfig(
            max_epochs=args.epochs, update_interval=args.interval, dilations=args.dilations,
            eta=args.eta, w1=args.w1, w2=args.w2, lr=args.lr, augmentations=args.augmentations,
            seed=args.seed, hierarchy=not args.no_hierarchy, laplacian=not args.no_laplacian,
            augment=not args.no_augment,
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    net_cfg = _network_config(args.net_config, cfg.hierarchy)
    try:
        instances = make_instances(partial, cfg)
    except GridError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    net = DeepPriorNet(net_cfg, seed=args.seed)
    out = args.out_dir
    outputs: list[Path] = []
    if args.dump_dir is not None:
        args.dump_dir.mkdir(parents=True, exist_ok=True)

    def dump(epoch: int, pred: SparseGrid):
        if args.dump_dir is None:
            return
        snap = MaskedTsdf(partial.dim, partial.tau_voxels,
                          SparseGrid(pred.domain, np.clip(pred.values[:, 0], -1.0, 1.0)),
                          partial.vacant - pred.domain, pred.domain)
        outputs.extend(_write_shape(args.dump_dir / f"snapshot_{epoch:05d}", snap))

    def progress(row: dict):
        if row["epoch"] % 50 == 0 or row["epoch"] == cfg.max_epochs - 1:
            log.info("epoch %d loss %.6g |M|=%d", row["epoch"], row["loss_total"], row["domain_size_s0"])

    history: list = []
    try:
        result = train(instances, net, cfg, on_update=dump, on_epoch=lambda r: (history.append(r), progress(r)))
    except TrainingError as exc:
        if exc.epoch is None:
            raise CliError(str(exc), EXIT_EMPTY) from exc
        write_log(out / "log.csv", history)
        outputs.append(out / "log.csv")
        if exc.last_good is not None:
            net.store.set_flat(exc.last_good)
            T.save_checkpoint(out / "last_good.ntkp", net.store)
            outputs.append(out / "last_good.ntkp")
            y = net.predict(instances[0].plan, instances[0].noise)[0]
            if np.all(np.isfinite(y.values)):
                snap = MaskedTsdf(partial.dim, partial.tau_voxels,
                                  SparseGrid(y.domain, np.clip(y.values[:, 0], -1.0, 1.0)),
                                  partial.vacant - y.domain, y.domain)
                outputs.extend(_write_shape(out / "last_good", snap))
        raise CliError(str(exc), EXIT_NUMERIC, outputs) from exc
    completed = result.completed_tsdf()
    outputs.extend(_write_shape(out / "completed", completed))
    write_log(out / "log.csv", result.log)
    T.save_checkpoint(out / "net.ntkp", net.store)
    (out / "net.json").write_text(net_cfg.to_json() + "\n")
    outputs += [out / "log.csv", out / "net.ntkp", out / "net.json"]
    if not len(marching_cubes(completed.values)):
        raise CliError("completed shape has no zero crossing", EXIT_EMPTY, outputs)
    return outputs


def _analytic_suite(args) -> list[Path]:
    rng = np.random.default_rng(args.seed)
    lines = ["spec layers channels filters size rel_frobenius"]
    worst = 0.0
    for i in range(args.specs):
        spec = N.Conv1dSpec.random(rng, int(rng.integers(1, 5)), 4, int(rng.integers(4, 17)))
        x = rng.normal(size=(spec.channels[0], spec.size))
        err = N.relative_frobenius(N.tape_gram_1d(spec, x).K, N.analytic_gram_1d(spec, x).K)
        worst = max(worst, err)
        lines.append(f"{i} {spec.n_layers} {'-'.join(map(str, spec.channels))} "
                     f"{'-'.join(map(str, spec.filters))} {spec.size} {err!r}")
    lines.append(f"max {worst!r}")
    path = args.out_dir / "analytic_1d.txt"
    path.write_text("\n".join(lines) + "\n")
    print(f"max relative Frobenius error: {worst:.3e}")
    return [path]


def _load_net(args) -> DeepPriorNet:
    if args.checkpoint is None:
        raise CliError("ntk needs a checkpoint unless --analytic-1d is given", EXIT_USAGE)
    cfg_path = args.net_config
    if cfg_path is None and (args.checkpoint.parent / "net.json").exists():
        cfg_path = args.checkpoint.parent / "net.json"
    net = DeepPriorNet(_network_config(cfg_path), seed=args.seed)
    try:
        store = T.load_checkpoint(args.checkpoint)
    except (OSError, T.TapeError, ValueError) as exc:
        raise CliError(f"cannot read checkpoint {args.checkpoint}: {exc}", EXIT_USAGE) from exc
    want = {k: v.shape for k, v in net.store.params.items()}
    have = {k: v.shape for k, v in store.params.items()}
    if want != have:
        raise CliError("checkpoint does not match the network architecture", EXIT_USAGE)
    for k, v in store.params.items():
        net.store.params[k][...] = v
    return net


def cmd_ntk(args) -> list[Path]:
    if args.analytic_1d:
        return _analytic_suite(args)
    tsdf = _read_tsdf(args.partial)
    net = _load_net(args)
    domain = tsdf.domain
    if not len(domain):
        domain = init_domain(tsdf.omega, tsdf.vacant, boundary_grids(tsdf), 4)
    tsdf = tsdf.with_domain(domain | tsdf.omega)
    plan = net.plan(tsdf.domain)
    noise = net.noise(plan, derive_seed(args.seed, 0))
    pred = net.predict(plan, noise)[0]
    mesh = marching_cubes(pred)
    if not len(mesh):
        mesh = marching_cubes(tsdf.values)
    if not len(mesh):
        raise CliError("no surface to sample kernel voxels from", EXIT_EMPTY)
    rows = N.sample_voxels(mesh, plan.domains[0], args.samples, args.seed)
    samples = N.SampleSet(plan, noise, rows)
    kg = N.gram(net, samples, cap=max(N.DEFAULT_SAMPLE_CAP, args.samples))
    out = args.out_dir
    kg.write_csv(out / "gram.csv")
    emb = N.kernel_pca(kg.K, min(3, len(kg)))
    if emb.colors is None:
        emb.colors = np.full((len(kg), 3), 0.5)
    N.write_pca_ply(out / "pca.ply", N.sample_world(samples), emb)
    N.write_scatter(out / "pca_scatter.csv", kg.ids, emb)
    # dynamics probe on the sampled voxels that carry known values
    known_idx = tsdf.omega.index_of(samples.coords())
    pick = np.flatnonzero(known_idx >= 0)[: args.probe_samples]
    results = []
    if pick.size:
        probe = N.SampleSet(plan, noise, rows[pick])
        targets = tsdf.values.values[known_idx[pick], 0]
        Kp = kg.K[np.ix_(pick, pick)]
        for lr in (args.probe_lr, args.probe_lr / 2):
            results.append(N.verify_dynamics(net, probe, targets, lr, Kp))
    N.write_dynamics(out / "dynamics.txt", results)
    return [out / "gram.csv", out / "pca.ply", out / "pca_scatter.csv", out / "dynamics.txt"]


def cmd_eval(args) -> list[Path]:
    if not args.delta > 0:
        raise CliError("--delta must be positive", EXIT_USAGE)
    pred = _read_mesh(args.completed)
    gt = _read_mesh(args.groundtruth)
    if not args.no_normalize:
        gt, _, _ = normalize_mesh(gt)
    score = fscore(sample_surface(pred, args.points, args.seed),
                   sample_surface(gt, args.points, args.seed + 1), args.delta)
    path = args.out_dir / "metrics.csv"
    write_metrics(path, score)
    print(f"precision {score.precision:.3f} recall {score.recall:.3f} fscore {score.fscore:.3f}")
    return [path]


COMMANDS = {"scan": cmd_scan, "complete": cmd_complete, "ntk": cmd_ntk, "eval": cmd_eval}


def _inputs(args) -> list:
    return [getattr(args, k) for k in ("mesh", "partial", "checkpoint", "completed", "groundtruth")
            if getattr(args, k, None) is not None]


def main(argv=None) -> int:
    started = time.time()
    try:
        args = parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    code, outputs, status = EXIT_OK, [], "ok"
    try:
        threads = resolve_threads(args.threads)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=threads):
            outputs = COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code, status, outputs = exc.code, f"error: {exc}", exc.outputs
    except (GridError, N.NtkError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code, status = EXIT_USAGE, f"error: {exc}"
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code, status = EXIT_NUMERIC, f"error: {exc}"
    if args.out_dir.is_dir():
        write_manifest(args.out_dir, args.command, _config_of(args), args.seed, _inputs(args),
                       outputs, started, status)
    return code


if __name__ == "__main__":
    sys.exit(main())
