"""Command-line entry point.

Exit status: 0 on success, 1 for user errors (bad arguments, unreadable or
malformed inputs, unreachable critic), 2 for internal failures. Logs are
``key=value`` lines on stderr; artifacts go only to the paths given with --out.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path


from . import __version__
from .critique import (
    CriticProtocolError,
    CriticTransportError,
    EmptyTrainingSetError,
    HttpCritic,
    ScriptedCritic,
    reflect_loop,
)
from .enhance import (
    CameraTrajectory,
    EnhancementAborted,
    EnhancerError,
    ExternalEnhancer,
    IdentityEnhancer,
    Intrinsics,
    SharpenEnhancer,
    default_trajectory,
    iterative_enhance,
)
from .gaussians import GaussianCloud
from .io.checkpoint import FORMAT_VERSION, Checkpoint, config_hash, load_checkpoint, save_checkpoint
from .io.config import RunConfig, dump_config, load_config
from .io.dataset import load_dataset, write_metrics
from .io.errors import FormatError
from .io.images import save_image
from .io.poses import load_camera, load_pose_sequence, load_trajectory
from .io.sequence import write_image_sequence
from .reconstruction import Reconstruction, build_avatar
from .render import render
from .train import Trainer, TrainingDivergedError, evaluate

log = logging.getLogger("humangs.cli")

USER_ERRORS = (FormatError, OSError, ValueError, EmptyTrainingSetError, CriticProtocolError,
               CriticTransportError, EnhancerError, EnhancementAborted, TrainingDivergedError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class _KeyValueFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        if "=" not in msg.split(" ", 1)[0]:
            msg = "msg=" + json.dumps(msg)
        return f"level={record.levelname.lower()} logger={record.name} {msg}"


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KeyValueFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    logging.captureWarnings(True)


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    train = cfg.train
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "iterations", None) is not None:
        train = replace(train, iterations=args.iterations)
    train.validate()
    return replace(cfg, train=train)


def _provenance(cfg: RunConfig, command: str, previous: dict | None = None) -> dict:
    prov = dict(previous or {})
    history = list(prov.get("history", []))
    history.append(command)
    prov.update({"version": __version__, "seed": cfg.train.seed, "config_hash": config_hash(dump_config(cfg)),
                 "history": history})
    return prov


def _pose_for(ckpt: Checkpoint, poses_path, frame: int | None):
    if poses_path is None:
        return None
    human = ckpt.recon.human
    seq = load_pose_sequence(poses_path, human.skeleton.n_joints if human is not None else None)
    idx = 0 if frame is None else frame
    if not 0 <= idx < len(seq):
        raise ValueError(f"frame {idx} outside the {len(seq)}-frame pose sequence")
    return seq.frames[idx]


# --------------------------------------------------------------------------
# subcommands


def cmd_reconstruct(args) -> int:
    cfg = _run_config(args)
    data = load_dataset(args.data)
    scene = GaussianCloud.empty(cfg.human.sh_degree)
    if data.scene_points is not None:
        pts = data.scene_points
        scene = GaussianCloud.from_points(pts.positions, pts.colors, sh_degree=cfg.human.sh_degree)
    human = None
    if data.rig is not None:
        h = cfg.human
        human = build_avatar(data.rig.mesh, data.rig.weights, data.rig.skeleton, h.n_points, cfg.train.seed,
                             h.sh_degree, h.feature_dim, h.plane_resolution, h.hidden)
    if len(scene) == 0 and human is None:
        raise ValueError("dataset provides neither scene_points nor a rig; nothing to reconstruct")
    recon = Reconstruction(scene, human, data.scene_translation)
    log.info("event=reconstruct_start views=%d gaussians=%d iterations=%d seed=%d", len(data.views),
             recon.num_gaussians, cfg.train.iterations, cfg.train.seed)
    trainer = Trainer(recon, data.views, cfg.train)
    report = trainer.run(cfg.train.iterations)
    metrics = {"train": report.as_dict()}
    if data.heldout:
        metrics["heldout"] = evaluate(trainer.recon, data.heldout, cfg.train.background).as_dict()
    save_checkpoint(args.out, Checkpoint(trainer.recon, trainer.state, trainer.iteration,
                                         _provenance(cfg, "reconstruct")))
    if args.metrics:
        metrics["train"].pop("wall_clock", None)
        write_metrics(args.metrics, metrics)
    log.info("event=reconstruct_done gaussians=%d out=%s", trainer.recon.num_gaussians, args.out)
    return 0


def _critic(cfg: RunConfig):
    c = cfg.critic
    if c.kind == "scripted":
        if not c.script:
            raise ValueError("critic.script is required for the scripted critic")
        return ScriptedCritic.from_file(c.script)
    if not c.url:
        raise ValueError("critic.url is required for the http critic")
    return HttpCritic(c.url, c.timeout, c.retries, c.prompt_dir)


def cmd_critique(args) -> int:
    cfg = _run_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    result = reflect_loop(ckpt.recon, data.views, _critic(cfg), cfg.train)
    save_checkpoint(args.out, Checkpoint(result.recon, None, ckpt.iteration,
                                         _provenance(cfg, "critique", ckpt.provenance)))
    report = {
        "rounds": [[{"view": r.view_id, "round": r.round,
                     "regions": [{"box": list(g.box), "label": g.label.value, "note": g.note} for g in r.regions]}
                    for r in rnd] for rnd in result.rounds],
        "negative_counts": result.negative_counts,
        "selected_round": result.selected_round,
        "degraded": result.degraded,
    }
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=1, sort_keys=True))
    log.info("event=critique_done rounds=%d selected=%d degraded=%s", result.n_rounds, result.selected_round,
             str(result.degraded).lower())
    return 0


def cmd_animate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    recon = ckpt.recon
    if recon.human is None:
        raise ValueError("checkpoint has no human avatar to animate")
    seq = load_pose_sequence(args.poses, recon.human.skeleton.n_joints)
    traj = load_trajectory(args.trajectory)
    bg = _run_config(args).train.background
    frames = []
    for pose in seq.frames:
        cam = _camera_at(traj, pose.time)
        frames.append(render(recon.compose(pose), cam, bg, keep_cache=False).color)
    names = write_image_sequence(args.out, frames, seq.fps)
    log.info("event=animate_done frames=%d out=%s", len(names), args.out)
    return 0


def _camera_at(traj: CameraTrajectory, t: float):
    """Latest trajectory camera whose time is <= t (the first one before the start)."""
    cam = traj.entries[0][1]
    for time_, c in traj.entries:
        if time_ <= t:
            cam = c
    return cam


def _enhancer(cfg: RunConfig):
    e = cfg.enhancer
    if e.kind == "identity":
        return IdentityEnhancer()
    if e.kind == "sharpen":
        return SharpenEnhancer(e.amount, e.sigma)
    if not e.command:
        raise ValueError("enhancer.command is required for the external enhancer")
    return ExternalEnhancer(e.command, e.timeout)


def cmd_enhance(args) -> int:
    cfg = _run_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    recon = ckpt.recon
    if args.trajectory:
        traj = load_trajectory(args.trajectory)
    else:
        world = recon.compose()
        traj = default_trajectory(world, Intrinsics.from_fov(args.size, args.size))
    poses = None
    if args.poses:
        pose = _pose_for(ckpt, args.poses, args.frame)
        poses = [pose] * len(traj)
    result = iterative_enhance(recon, _enhancer(cfg), traj, cfg.train, poses)
    save_checkpoint(args.out, Checkpoint(result.recon, None, ckpt.iteration,
                                         _provenance(cfg, "enhance", ckpt.provenance)))
    log.info("event=enhance_done enhancer_calls=%d inner_steps=%d", result.enhancer_calls, result.inner_steps)
    return 0


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cam = load_camera(args.camera)
    pose = _pose_for(ckpt, args.poses, args.frame)
    bg = _run_config(args).train.background
    img = render(ckpt.recon.compose(pose), cam, bg, keep_cache=False).color
    save_image(args.out, img)
    log.info("event=render_done width=%d height=%d out=%s", cam.width, cam.height, args.out)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    views = data.heldout if (args.heldout and data.heldout) else data.views
    metrics = evaluate(ckpt.recon, views, _run_config(args).train.background)
    write_metrics(args.out, metrics.as_dict())
    log.info("event=eval_done views=%d psnr=%.4f", len(views), metrics.mean.get("psnr", float("nan")))
    return 0


def cmd_info(args) -> int:
    if not args.checkpoint and not args.config:
        raise ValueError("info needs a checkpoint and/or --config")
    lines = []
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        r = ckpt.recon
        lines += [f"format_version={FORMAT_VERSION}",
                  f"gaussians={r.num_gaussians}",
                  f"scene_gaussians={len(r.scene)}",
                  f"human_gaussians={0 if r.human is None else len(r.human.canonical)}",
                  f"joints={0 if r.human is None else r.human.skeleton.n_joints}",
                  f"sh_degree={r.scene.sh_degree if r.human is None else r.human.canonical.sh_degree}",
                  f"iteration={ckpt.iteration}"]
        lines += [f"provenance.{k}={json.dumps(v)}" for k, v in sorted(ckpt.provenance.items())]
        if ckpt.skipped_sections:
            lines.append(f"skipped_sections={','.join(ckpt.skipped_sections)}")
    if args.config:
        cfg = load_config(args.config)
        lines.append(f"config_hash={config_hash(dump_config(cfg))}")
        lines.append(f"iterations={cfg.train.iterations}")
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override train.seed")
    common.add_argument("--config", default=None, help="JSON run configuration")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="humangs", description="Animatable human and scene Gaussian reconstruction.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("reconstruct", parents=[common], help="train a reconstruction from a dataset")
    s.add_argument("--data", required=True, help="dataset manifest (JSON)")
    s.add_argument("--out", required=True, help="output checkpoint")
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--metrics", default=None, help="metrics file (key=value, plus <path>.json)")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("critique", parents=[common], help="critic-driven refinement of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report", default=None, help="per-round report (JSON)")
    s.set_defaults(func=cmd_critique)

    s = sub.add_parser("animate", parents=[common], help="render a pose sequence along a trajectory")
    s.add_argument("checkpoint")
    s.add_argument("--poses", required=True)
    s.add_argument("--trajectory", required=True)
    s.add_argument("--out", required=True, help="output directory for frames and manifest.txt")
    s.set_defaults(func=cmd_animate)

    s = sub.add_parser("enhance", parents=[common], help="iterative enhancement with a sequence enhancer")
    s.add_argument("checkpoint")
    s.add_argument("--trajectory", default=None, help="camera trajectory; default is an orbit")
    s.add_argument("--size", type=int, default=64, help="image size of the default orbit")
    s.add_argument("--poses", default=None)
    s.add_argument("--frame", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("render", parents=[common], help="render one image")
    s.add_argument("checkpoint")
    s.add_argument("--camera", required=True)
    s.add_argument("--poses", default=None)
    s.add_argument("--frame", type=int, default=None)
    s.add_argument("--out", required=True, help=".png or .ppm")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", parents=[common], help="image metrics against dataset views")
    s.add_argument("checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--heldout", action="store_true", help="use the held-out views")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("info", parents=[common], help="summarise a checkpoint and/or config")
    s.add_argument("checkpoint", nargs="?", default=None)
    s.set_defaults(func=cmd_info)

    s = sub.add_parser("demo", parents=[common], help="write a small synthetic dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--size", type=int, default=48)
    s.set_defaults(func=cmd_demo)
    return p


def cmd_demo(args) -> int:
    from .demo import write_demo_dataset

    seed = 0 if args.seed is None else args.seed
    path = write_demo_dataset(args.out, seed=seed, size=args.size)
    log.info("event=demo_done manifest=%s", path)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"humangs: error: {exc}\n")
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        log.error("event=failed command=%s error=%s detail=%s", args.command, type(exc).__name__,
                  json.dumps(str(exc)))
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("event=internal_error command=%s error=%s", args.command, type(exc).__name__)
        return 2


if __name__ == "__main__":
    sys.exit(main())
