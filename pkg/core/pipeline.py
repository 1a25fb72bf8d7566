"""
Workflow orchestration shared by the CLI and the harness app.

Sequence directory layout (written by ``write_sequence``, read by
``load_sequence``)::

    calib.txt                 intrinsics, key = value
    depth/%06d.png            16-bit depth, raw / 256 m
    image/%06d.png            8-bit grayscale
    flow/%06d_%06d.flo        observed flow from frame i to frame j
    poses.txt                 ground truth, KITTI format (optional)
    manifest.json

Per-stage random streams all derive from the run seed:
SeedSequence([seed, STAGE]) with the stage ids below.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from tqdm import tqdm

from src.engines.features import extract_all
from src.engines.flow_synth import flow_from_pose, generate_training_batch
from src.engines.pose_graph import PoseGraph, build_graph, optimize
from src.engines.reloc import LoopCandidate, Vocabulary, build_vocabulary, detect_loops
from src.engines.renderer import SimRun, generate_run
from src.engines.trajectory_metrics import evaluate, format_report, summarize_runs
from src.engines.vo_estimator import MotionEstimate, PairEstimator, save_external_motions
from src.models import motion_model
from src.models.camera import Intrinsics
from src.models.motion_model import MotionModel
from src.models.rasters import DepthMap, FlowField
from src.models.se3 import Motion6DoF, SE3Pose, compose, inverse, motion_to_se3
from src.models.trajectory import Trajectory, motions_from_trajectory
from src.utils import file_io
from src.utils.data_loaders import RunConfig
from src.utils.errors import ConfigError, InputError
from src.utils.log import progress_enabled

logger = logging.getLogger(__name__)

DEPTH_SCALE = file_io.DEPTH_SCALE
STAGE_VOCABULARY = 2
STAGE_ODOMETRY_NOISE = 3


def stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage]))


def _frame_name(k: int) -> str:
    return f"{k:06d}"


def flow_name(i: int, j: int) -> str:
    return f"{i:06d}_{j:06d}.flo"


# -- sequences ---------------------------------------------------------------------


@dataclass(eq=False)
class SequenceData:
    intrinsics: Optional[Intrinsics]
    depths: list[DepthMap]
    images: list[np.ndarray]
    flows: dict[tuple[int, int], FlowField]
    ground_truth: Optional[Trajectory] = None
    manifest: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return max(len(self.depths), len(self.images))

    @classmethod
    def from_sim(cls, run: SimRun, intr: Intrinsics) -> "SequenceData":
        flows = {(k, k + 1): f for k, f in enumerate(run.flows)}
        return cls(intr, list(run.depths), list(run.images), flows, run.trajectory, dict(run.manifest))


def write_sequence(out_dir: Path, run: SimRun, intr: Intrinsics, seed: int) -> None:
    out = Path(out_dir)
    for sub in ("depth", "image", "flow"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    file_io.write_calib(out / "calib.txt", intr)
    for k, (depth, image) in enumerate(zip(run.depths, run.images)):
        file_io.write_depth_png16(out / "depth" / f"{_frame_name(k)}.png", depth, DEPTH_SCALE)
        file_io.write_gray_png(out / "image" / f"{_frame_name(k)}.png", image)
    for k, flow in enumerate(run.flows):
        file_io.write_flo(out / "flow" / flow_name(k, k + 1), flow)
    file_io.write_kitti_poses(out / "poses.txt", run.trajectory)
    file_io.write_manifest(out / "manifest.json", {**run.manifest, "seed": seed})


def _numbered(directory: Path, suffix: str) -> list[Path]:
    return sorted(p for p in directory.glob(f"*{suffix}") if p.stem.isdigit())


def load_sequence(seq_dir: Path, cfg: Optional[RunConfig] = None) -> SequenceData:
    d = Path(seq_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"No such sequence directory: {d}")
    intr = cfg.intrinsics() if cfg is not None else None
    if intr is None and (d / "calib.txt").is_file():
        intr = file_io.read_calib(d / "calib.txt")

    depths = [file_io.read_depth_png16(p, DEPTH_SCALE) for p in _numbered(d / "depth", ".png")]
    images = [file_io.read_gray_png(p) for p in _numbered(d / "image", ".png")]
    flows = {}
    for p in sorted((d / "flow").glob("*.flo")):
        parts = p.stem.split("_")
        if len(parts) == 2 and all(s.isdigit() for s in parts):
            flows[(int(parts[0]), int(parts[1]))] = file_io.read_flo(p)
    gt = file_io.read_trajectory(d / "poses.txt") if (d / "poses.txt").is_file() else None
    manifest = file_io.read_manifest(d / "manifest.json") if (d / "manifest.json").is_file() else {}
    seq = SequenceData(intr, depths, images, flows, gt, manifest)
    if seq.num_frames < 2:
        raise InputError(f"{d}: sequence needs at least 2 frames, found {seq.num_frames}")
    if gt is not None and len(gt) != seq.num_frames:
        raise InputError(f"{d}: poses.txt has {len(gt)} poses for {seq.num_frames} frames")
    logger.info("loaded sequence %s: %d frames, %d flow fields", d, seq.num_frames, len(flows))
    return seq


# -- simulate ----------------------------------------------------------------------


def simulate(cfg: RunConfig, seed: int, threads: int = 1, depth_scale: Optional[float] = DEPTH_SCALE) -> tuple[SimRun, Intrinsics]:
    intr = cfg.sim_intrinsics()
    run = generate_run(cfg.trajectory_spec(seed), cfg.scene(seed), intr, threads, depth_scale)
    return run, intr


def run_simulate(cfg: RunConfig, out_dir: Path, seed: int, threads: int = 1) -> SimRun:
    run, intr = simulate(cfg, seed, threads)
    write_sequence(out_dir, run, intr, seed)
    return run


# -- synth -----------------------------------------------------------------------


def load_depth_dir(depth_dir: Path, intr: Optional[Intrinsics] = None, disparity: bool = False) -> list[DepthMap]:
    d = Path(depth_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"No such depth directory: {d}")
    paths = sorted(d.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"No PNG rasters in {d}")
    if disparity:
        if intr is None:
            raise ConfigError("disparity input needs intrinsics with a stereo baseline")
        return [file_io.read_disparity_png16(p, intr, DEPTH_SCALE) for p in paths]
    return [file_io.read_depth_png16(p, DEPTH_SCALE) for p in paths]


def run_synth(
    depths: Sequence[DepthMap],
    model: MotionModel,
    intr: Intrinsics,
    count: int,
    seed: int,
    out_dir: Path,
    threads: int = 1,
    sources: Optional[Sequence[str]] = None,
) -> dict:
    """Writes flow/%06d.flo, motions.csv and manifest.json; returns the manifest."""
    out = Path(out_dir)
    (out / "flow").mkdir(parents=True, exist_ok=True)
    samples = generate_training_batch(depths, model, seed, count, intr, threads)
    for s in samples:
        file_io.write_flo(out / "flow" / f"{_frame_name(s.index)}.flo", s.flow)
    file_io.write_motion_records(
        out / "motions.csv",
        [s.motion for s in samples],
        index={"sample": [s.index for s in samples], "depth_index": [s.depth_index for s in samples]},
    )
    manifest = {
        "kind": "synthetic_flow",
        "seed": seed,
        "count": count,
        "depth_sources": list(sources) if sources is not None else len(depths),
        "motion_model": model.to_params(),
        "intrinsics": {"f_x": intr.f_x, "f_y": intr.f_y, "c_x": intr.c_x, "c_y": intr.c_y,
                       "width": intr.width, "height": intr.height},
        "samples": [
            {"index": s.index, "depth_index": s.depth_index, "seed_entropy": list(s.seed_entropy)}
            for s in samples
        ],
    }
    file_io.write_manifest(out / "manifest.json", manifest)
    return manifest


# -- fit-motion ----------------------------------------------------------------


def run_fit_motion(motions: Sequence[Motion6DoF], out_path: Path, bounds: Optional[dict] = None) -> MotionModel:
    model = motion_model.fit(motions)
    if bounds:
        model = model.with_bounds(bounds)
    motion_model.save(model, out_path)
    return model


def motions_from_file(path: Path, strides: Sequence[int] = (1,)) -> list[Motion6DoF]:
    """Pose file (KITTI/TUM) -> relative motions pooled over ``strides``;
    ``.csv`` -> motion records (stride 1 only)."""
    strides = tuple(strides)
    if not strides or any(s < 1 for s in strides):
        raise ConfigError(f"strides must be positive frame gaps, got {list(strides)}")
    p = Path(path)
    if p.suffix.lower() == ".csv":
        if strides != (1,):
            raise ConfigError("motion records are already relative motions; --strides needs a pose file")
        return file_io.read_motion_records(p)
    traj = file_io.read_trajectory(p)
    pooled = [m for s in strides for m in motions_from_trajectory(traj, s)]
    logger.info("pooled %d relative motions over strides %s", len(pooled), list(strides))
    return pooled


# -- vo -------------------------------------------------------------------------


def _pair_inputs(seq: SequenceData, i: int, j: int) -> tuple[Optional[FlowField], Optional[DepthMap]]:
    depth = seq.depths[i] if i < len(seq.depths) else None
    return seq.flows.get((i, j)), depth


def estimate_odometry(seq: SequenceData, estimator: PairEstimator, threads: int = 1) -> list[MotionEstimate]:
    n = seq.num_frames
    for k in range(n - 1):
        if estimator.needs_flow(k, k + 1) and (k, k + 1) not in seq.flows:
            raise InputError(f"missing flow for frames ({k}, {k + 1})")
    if any(estimator.needs_flow(k, k + 1) for k in range(n - 1)) and estimator.intr is None:
        raise ConfigError("geometric VO needs intrinsics (calib.txt or [camera])")

    def one(k: int) -> MotionEstimate:
        flow, depth = _pair_inputs(seq, k, k + 1)
        return estimator.estimate(k, k + 1, flow, depth)

    bar = tqdm(total=n - 1, desc="vo", unit="pair", disable=not progress_enabled(), leave=False)
    out = []
    try:
        if threads <= 1:
            for k in range(n - 1):
                out.append(one(k))
                bar.update()
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for est in pool.map(one, range(n - 1)):
                    out.append(est)
                    bar.update()
    finally:
        bar.close()
    return out


def integrate(odometry: Sequence[MotionEstimate]) -> Trajectory:
    """Chain the camera motions (inverse of each point motion) from identity."""
    poses = [SE3Pose.identity()]
    for est in odometry:
        poses.append(compose(poses[-1], inverse(motion_to_se3(est.motion))))
    return Trajectory.from_poses(poses)


def inject_odometry_noise(
    odometry: Sequence[MotionEstimate], sigma_t: float, sigma_rot: float, seed: int
) -> list[MotionEstimate]:
    """Per-DoF zero-mean Gaussian perturbation of every motion, one seeded stream."""
    rng = stage_rng(seed, STAGE_ODOMETRY_NOISE)
    sig = np.array([sigma_t] * 3 + [sigma_rot] * 3)
    out = []
    for est in odometry:
        noisy = Motion6DoF.from_array(est.motion.as_array() + rng.normal(0.0, 1.0, 6) * sig)
        out.append(
            MotionEstimate(noisy, est.covariance, est.inlier_fraction, est.residual_rms, est.converged,
                           est.iterations, est.frames)
        )
    return out


def run_vo(seq: SequenceData, cfg: RunConfig, out_dir: Path, threads: int = 1) -> tuple[list[MotionEstimate], Trajectory]:
    estimator = PairEstimator(cfg.estimator_policy(), seq.intrinsics)
    odometry = estimate_odometry(seq, estimator, threads)
    traj = integrate(odometry)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_external_motions(out / "motions.txt", odometry)
    file_io.write_kitti_poses(out / "trajectory_vo.txt", traj)
    file_io.write_trajectory_points(out / "points_vo.txt", traj)
    if seq.ground_truth is not None:
        metrics = evaluate(seq.ground_truth, traj)
        (out / "report.txt").write_text(format_report(summarize_runs([metrics]), {"align": "rigid"}), encoding="utf-8")
    return odometry, traj


# -- slam ----------------------------------------------------------------------


@dataclass(eq=False)
class SlamResult:
    odometry: list[MotionEstimate]
    vo_trajectory: Trajectory
    slam_trajectory: Trajectory
    initial_graph: PoseGraph
    graph: PoseGraph
    candidates: list[LoopCandidate]
    loops_used: list[LoopCandidate]
    chi2: float
    iterations: int
    metrics: dict = field(default_factory=dict)


def _loop_flow(seq: SequenceData, i: int, j: int, mode: str) -> Optional[FlowField]:
    if mode == "file":
        return seq.flows.get((i, j))
    if seq.ground_truth is not None and seq.intrinsics is not None:
        gt = seq.ground_truth
        return flow_from_pose(seq.depths[i], compose(inverse(gt[j]), gt[i]), seq.intrinsics)
    return None


def _vocabulary(cfg: RunConfig, features, seed: int) -> Vocabulary:
    if cfg.reloc.vocabulary:
        path = Path(cfg.reloc.vocabulary)
        return file_io.read_vocabulary(path if path.is_absolute() else cfg.base_dir / path)
    pooled = np.concatenate([f.descriptors for f in features], axis=0)
    vocab_seed = int(np.random.SeedSequence([seed, STAGE_VOCABULARY]).generate_state(1)[0])
    return build_vocabulary(pooled, cfg.reloc.vocabulary_size, vocab_seed)


def run_slam(seq: SequenceData, cfg: RunConfig, seed: int, threads: int = 1) -> SlamResult:
    sigmas, hp = cfg.sigma_params(), cfg.hyper_params()
    estimator = PairEstimator(cfg.estimator_policy(), seq.intrinsics)
    odometry = estimate_odometry(seq, estimator, threads)
    if cfg.odometry_noise.enabled:
        odometry = inject_odometry_noise(odometry, cfg.odometry_noise.sigma_t, cfg.odometry_noise.sigma_rot, seed)

    if cfg.slam.loop_flow == "oracle":
        logger.warning("loop_flow = oracle: loop edges are measured from ground-truth poses")
    candidates: list[LoopCandidate] = []
    loops: list[tuple[LoopCandidate, MotionEstimate]] = []
    if hp.loops_enabled and seq.num_frames - 1 > hp.T_loop:
        if len(seq.images) != seq.num_frames:
            raise InputError(f"loop detection needs an image per frame, found {len(seq.images)}")
        features = extract_all(seq.images, threads)
        vocab = _vocabulary(cfg, features, seed)
        candidates = detect_loops(
            features, vocab, hp.T_loop, cfg.reloc.N_th, cfg.reloc.ratio, cfg.reloc.top_k, keep_failed=True
        )
        for cand in (c for c in candidates if c.passed):
            flow = None
            if estimator.needs_flow(cand.i, cand.j):
                flow = _loop_flow(seq, cand.i, cand.j, cfg.slam.loop_flow)
                if flow is None:
                    logger.warning("no flow for loop (%d, %d), skipped", cand.i, cand.j)
                    continue
            try:
                est = estimator.estimate(cand.i, cand.j, flow, seq.depths[cand.i] if flow is not None else None)
            except InputError as exc:
                logger.warning("loop (%d, %d) rejected: %s", cand.i, cand.j, exc)
                continue
            loops.append((cand, est))

    graph = build_graph(odometry, loops, sigmas, hp, cfg.slam.per_edge_covariance, cfg.slam.information_method)
    result = optimize(graph, cfg.slam.max_iters, cfg.slam.tol)
    vo_traj = Trajectory.from_poses(graph.poses())
    slam_traj = Trajectory.from_poses(result.graph.poses())

    metrics = {}
    if seq.ground_truth is not None:
        metrics = {
            "vo": evaluate(seq.ground_truth, vo_traj),
            "slam": evaluate(seq.ground_truth, slam_traj),
        }
        logger.info("ATE: VO %.4f m -> SLAM %.4f m", metrics["vo"]["ate"], metrics["slam"]["ate"])
    return SlamResult(
        odometry, vo_traj, slam_traj, graph, result.graph, candidates, [c for c, _ in loops],
        result.chi2, result.iterations, metrics,
    )


def write_slam_outputs(out_dir: Path, result: SlamResult, seed: int, cfg: RunConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    file_io.write_kitti_poses(out / "trajectory_slam.txt", result.slam_trajectory)
    file_io.write_kitti_poses(out / "trajectory_vo.txt", result.vo_trajectory)
    file_io.write_trajectory_points(out / "points_slam.txt", result.slam_trajectory)
    file_io.write_trajectory_points(out / "points_vo.txt", result.vo_trajectory)
    file_io.write_g2o(out / "graph.g2o", result.graph, cfg.slam.g2o_information)
    file_io.write_loop_candidates(out / "loops.txt", result.candidates)
    meta = {
        "seed": seed,
        "C_si": cfg.slam.C_si,
        "C_r": cfg.slam.C_r,
        "T_loop": cfg.slam.T_loop,
        "N_th": cfg.reloc.N_th,
        "loop_flow": cfg.slam.loop_flow,
        "loop_edges": len(result.loops_used),
        "iterations": result.iterations,
        "chi2": result.chi2,
    }
    if result.metrics:
        row = {f"{run}_{k}": v for run, values in result.metrics.items() for k, v in values.items() if k != "align"}
        meta["align"] = result.metrics["slam"]["align"]
        text = format_report(summarize_runs([row]), meta)
    else:
        text = "\n".join(f"{k}={v}" for k, v in meta.items()) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    file_io.write_manifest(out / "manifest.json", {"kind": "slam", **meta})


# -- eval ----------------------------------------------------------------------


def run_eval(gt: Trajectory, est: Trajectory, align: str = "rigid", delta: int = 1, step: int = 1) -> tuple[dict, str]:
    metrics = evaluate(gt, est, align, delta, step)
    text = format_report(summarize_runs([metrics]), {"align": align, "delta": delta, "step": step})
    return metrics, text


def seed_sweep(cfg: RunConfig, seeds: Sequence[int], threads: int = 1) -> list[dict]:
    """Simulated SLAM runs over several seeds; one metrics row per seed."""
    rows = []
    for s in seeds:
        run, intr = simulate(cfg, s, threads)
        res = run_slam(SequenceData.from_sim(run, intr), cfg, s, threads)
        rows.append({
            "seed": s,
            "vo_ate": res.metrics["vo"]["ate"],
            "slam_ate": res.metrics["slam"]["ate"],
            "loop_edges": len(res.loops_used),
        })
    return rows


def ratio_ok(rows: Sequence[dict], limit: float = 0.25) -> bool:
    vo = float(np.mean([r["vo_ate"] for r in rows]))
    slam = float(np.mean([r["slam_ate"] for r in rows]))
    return math.isfinite(vo) and slam <= limit * vo
