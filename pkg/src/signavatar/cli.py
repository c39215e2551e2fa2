"""Command-line entry point: ``signavatar <command> [options]``.

Every command loads and validates its inputs first, computes, stages all
outputs in a scratch directory and only then copies them to ``--out``
together with a ``manifest.json`` (config hash, seed, input and output
digests). Exit codes: 0 ok, 2 usage, 3 bad input, 4 computation failure,
5 output failure.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .align import (
    BLANK_NAME,
    extract_coarticulations,
    forced_align,
    load_coarticulations,
    read_gloss_manifest,
    read_posteriors,
    save_coarticulations,
    segments_from_path,
)
from .connector import (
    ConnectorTrainConfig,
    connector_hash,
    evaluate_l1,
    fixed_duration,
    load_model,
    save_model,
    stitch,
    train_connector,
    write_training_log,
)
from .dictionary import Dictionary, Sign3D, load_confidences
from .fitter import (
    CalibrationConfig,
    SharedCalibration,
    StageSchedule,
    default_schedule,
    fit_video,
    precalibrate_video,
)
from .formats import FormatError, export_animation, load_keypoints, write_keypoints
from .objective import FitWeights
from .pipeline import (
    AugmentConfig,
    FileTranslator,
    LexiconTranslator,
    augment_3d,
    metric_2d_kl,
    metric_tc,
    multiview_project,
    project_sequence,
    translate,
)
from .skeleton import KinematicTree, default_camera, default_tree, load_tree

log = logging.getLogger("signavatar")

OUT_ENV = "SIGNAVATAR_OUT"
MANIFEST = "manifest.json"
EXIT = {"usage": 2, "input": 3, "computation": 4, "output": 5}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


@contextlib.contextmanager
def phase(category: str):
    """Re-raise library failures as categorised CLI errors."""
    try:
        yield
    except CliError:
        raise
    except (ValueError, RuntimeError, KeyError, OSError) as exc:
        msg = str(exc) or type(exc).__name__
        if isinstance(exc, OSError) and exc.filename and str(exc.filename) not in msg:
            msg = f"{msg}: {exc.filename}"
        raise CliError(category, msg) from exc


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

EXPORT_FORMATS = ("bvh", "anim-json")


@dataclass
class RunConfig:
    seed: int = 0
    tree: str | None = None
    workers: int = 1
    paths: dict = field(default_factory=dict)
    weights: FitWeights = field(default_factory=FitWeights)
    schedule: StageSchedule = field(default_factory=default_schedule)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    connector: ConnectorTrainConfig = field(default_factory=ConnectorTrainConfig)
    augment: dict = field(default_factory=lambda: {"max_angle_deg": 20.0, "axis": [0.0, 1.0, 0.0], "views_deg": [0.0, 60.0]})
    export: dict = field(
        default_factory=lambda: {"formats": list(EXPORT_FORMATS), "frame_time": 0.04, "mode": "pose", "unknown": "skip"}
    )

    def to_dict(self) -> dict:
        """Everything except file paths; this is what the config hash covers."""
        return {
            "seed": self.seed,
            "weights": self.weights.to_dict(),
            "schedule": self.schedule.to_dict(),
            "calibration": {
                "max_frames": self.calibration.max_frames,
                "rigid_iters": self.calibration.rigid_iters,
                "shape_iters": self.calibration.shape_iters,
                "sigma_joint": self.calibration.sigma_joint,
            },
            "connector": self.connector.to_dict(),
            "augment": dict(self.augment),
            "export": dict(self.export),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


_CONFIG_KEYS = {"seed", "tree", "workers", "paths", "weights", "schedule", "calibration", "connector", "augment", "export"}


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise CliError("input", f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError("input", f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError("input", f"config {path} must hold a JSON object")
    extra = set(raw) - _CONFIG_KEYS
    if extra:
        raise CliError("input", f"config {path} has unknown sections: {', '.join(sorted(extra))}")
    base = path.parent
    cfg = RunConfig()
    with phase("input"):
        cfg.seed = int(raw.get("seed", cfg.seed))
        cfg.workers = int(raw.get("workers", cfg.workers))
        if raw.get("tree"):
            cfg.tree = str(base / raw["tree"])
        cfg.paths = {k: str(base / v) for k, v in raw.get("paths", {}).items()}
        if "weights" in raw:
            cfg.weights = FitWeights.from_dict(raw["weights"])
        if "schedule" in raw:
            cfg.schedule = StageSchedule.from_dict(raw["schedule"])
        if "calibration" in raw:
            cfg.calibration = CalibrationConfig(**raw["calibration"])
        if "connector" in raw:
            cfg.connector = ConnectorTrainConfig.from_dict(raw["connector"])
        cfg.augment = {**cfg.augment, **raw.get("augment", {})}
        cfg.export = {**cfg.export, **raw.get("export", {})}
    _check_config(cfg)
    return cfg


def _check_config(cfg: RunConfig):
    if cfg.workers < 1:
        raise CliError("input", "workers must be at least 1")
    fmts = cfg.export["formats"]
    bad = [f for f in fmts if f not in EXPORT_FORMATS]
    if bad or not fmts:
        raise CliError("input", f"export formats must be drawn from {EXPORT_FORMATS}, got {fmts}")
    if cfg.export["mode"] not in ("pose", "joint"):
        raise CliError("input", "export mode must be 'pose' or 'joint'")
    if cfg.export["unknown"] not in ("skip", "error"):
        raise CliError("input", "unknown policy must be 'skip' or 'error'")
    if not cfg.export["frame_time"] > 0:
        raise CliError("input", "frame time must be positive")
    if cfg.augment["max_angle_deg"] < 0:
        raise CliError("input", "augmentation range must be nonnegative")


# --------------------------------------------------------------------------
# run context
# --------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_path(path: Path) -> str:
    if path.is_dir():
        h = hashlib.sha256()
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(p.relative_to(path).as_posix().encode())
            h.update(sha256_file(p).encode())
        return h.hexdigest()
    return sha256_file(path)


class Run:
    """Inputs, a scratch output directory and the manifest of one command."""

    def __init__(self, command: str, args, cfg: RunConfig):
        self.command = command
        self.args = args
        self.cfg = cfg
        self.inputs: dict = {}
        self.result: dict = {}
        self._scratch = tempfile.TemporaryDirectory(prefix="signavatar-")
        self.stage = Path(self._scratch.name)

    def path(self, role: str, value=None, required: bool = True, kind: str = "file") -> Path | None:
        """Resolve a path from the flag or the config, check it exists and record its digest."""
        raw = value if value is not None else self.cfg.paths.get(role)
        if raw is None:
            if required:
                raise CliError("input", f"missing required path for {role!r} (flag or config 'paths.{role}')")
            return None
        p = Path(raw)
        ok = p.is_dir() if kind == "dir" else p.is_file()
        if not ok:
            raise CliError("input", f"{role} {'directory' if kind == 'dir' else 'file'} not found: {p}")
        self.inputs[role] = {"name": p.name, "sha256": _digest_path(p)}
        return p

    def record(self, role: str, p: Path):
        self.inputs[role] = {"name": p.name, "sha256": _digest_path(p)}

    def out_dir(self) -> Path:
        raw = self.args.out or self.cfg.paths.get("out") or os.environ.get(OUT_ENV)
        if not raw:
            raise CliError("input", f"no output directory: pass --out or set {OUT_ENV}")
        return Path(raw)

    def finish(self, out: Path) -> dict:
        outputs = {
            p.relative_to(self.stage).as_posix(): sha256_file(p)
            for p in sorted(self.stage.rglob("*"))
            if p.is_file()
        }
        manifest = {
            "format": "signavatar-manifest",
            "version": 1,
            "tool_version": __version__,
            "command": self.command,
            "config_hash": self.cfg.digest(),
            "seed": self.cfg.seed,
            "inputs": self.inputs,
            "outputs": outputs,
            "result": self.result,
        }
        with phase("output"):
            (self.stage / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
            out.mkdir(parents=True, exist_ok=True)
            shutil.copytree(self.stage, out, dirs_exist_ok=True)
        return manifest

    def close(self):
        self._scratch.cleanup()


def _tree(run: Run) -> KinematicTree:
    src = run.args.tree or run.cfg.tree
    if src is None:
        return default_tree()
    p = run.path("tree", src)
    with phase("input"):
        return load_tree(p)


def _pool_map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, *zip(*items)))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _load_streams(run: Run, paths, tree, role: str):
    out = []
    for k, raw in enumerate(paths):
        p = run.path(f"{role}[{k}]" if len(paths) > 1 else role, raw)
        with phase("input"):
            out.append((p, load_keypoints(p, tree)))
    return out


def cmd_calibrate(run: Run) -> None:
    tree = _tree(run)
    streams = _load_streams(run, run.args.keypoints or [run.cfg.paths.get("keypoints")], tree, "keypoints")
    out = run.out_dir()
    cals = {}
    with phase("computation"):
        for p, frames in streams:
            shared = precalibrate_video(frames, tree, default_camera(), run.cfg.weights, run.cfg.calibration)
            cals[p.stem] = shared.to_dict()
    with phase("output"):
        (run.stage / "calibration.json").write_text(json.dumps(cals, indent=1, sort_keys=True) + "\n")
    run.result = {"videos": sorted(cals)}
    run.finish(out)


def _fit_one(frames, tree, schedule, weights, calibration, shared, gloss, source):
    if shared is None:
        shared = precalibrate_video(frames, tree, default_camera(), weights, calibration)
    return fit_video(frames, tree, schedule, weights, shared=shared, gloss=gloss, source=source).sign


def cmd_fit(run: Run) -> None:
    tree = _tree(run)
    paths = run.args.keypoints or [run.cfg.paths.get("keypoints")]
    streams = _load_streams(run, paths, tree, "keypoints")
    glosses = run.args.gloss or [p.stem for p, _ in streams]
    if len(glosses) != len(streams):
        raise CliError("input", f"{len(glosses)} --gloss values for {len(streams)} keypoint files")
    shared = None
    cal_path = run.path("calibration", run.args.calibration, required=False)
    if cal_path is not None:
        with phase("input"):
            table = json.loads(cal_path.read_text(encoding="utf-8"))
            cal = {k: SharedCalibration.from_dict(v) for k, v in table.items()}
    out = run.out_dir()
    jobs = []
    for (p, frames), g in zip(streams, glosses):
        if cal_path is not None:
            if p.stem not in cal:
                raise CliError("input", f"calibration file has no entry for {p.stem!r}")
            shared = cal[p.stem]
        jobs.append((frames, tree, run.cfg.schedule, run.cfg.weights, run.cfg.calibration, shared, g, p.name))
    workers = run.args.workers or run.cfg.workers
    with phase("computation"):
        signs = _pool_map(_fit_one, jobs, workers)
        book = Dictionary(tree)
        for s in signs:
            book.insert(s)
    with phase("output"):
        book.save(run.stage / "dictionary")
    run.result = {"signs": [{"id": s.sign_id, "gloss": s.gloss, "frames": s.n_frames} for s in book.all_signs()]}
    run.finish(out)


def _align_one(vid, glosses, post, frames, tree, schedule, weights, calibration):
    path = forced_align(post, glosses)
    segs = segments_from_path(path)
    shared = precalibrate_video(frames, tree, default_camera(), weights, calibration)
    sign = fit_video(frames, tree, schedule, weights, shared=shared, gloss=vid, source=vid).sign
    samples = extract_coarticulations(segs, sign.joints, tree, source=vid)
    seg_info = []
    for s in segs:
        score = float(np.mean(post.probs[s.start : s.end + 1, s.label]))
        seg_info.append({"gloss": post.class_names[s.label], "start": s.start, "end": s.end, "score": score})
    info = {
        "id": vid,
        "glosses": list(glosses),
        "frames": post.n_frames,
        "path": [post.class_names[int(c)] for c in path],
        "segments": seg_info,
        "calibration": shared.to_dict(),
    }
    return info, sign, samples


def _find(directory: Path, stem: str, suffixes) -> Path | None:
    for suf in suffixes:
        p = directory / f"{stem}{suf}"
        if p.is_file():
            return p
    return None


def cmd_align(run: Run) -> None:
    tree = _tree(run)
    man_path = run.path("glosses", run.args.glosses)
    post_dir = run.path("posteriors", run.args.posteriors, kind="dir")
    kps_dir = run.path("keypoints_dir", run.args.keypoints_dir, kind="dir")
    with phase("input"):
        manifest = read_gloss_manifest(man_path)
    if not manifest:
        raise CliError("input", f"gloss manifest {man_path} lists no videos")
    jobs = []
    for vid, glosses in manifest.items():
        pp = _find(post_dir, vid, (".post", ".csv"))
        kp = _find(kps_dir, vid, (".kps",))
        if pp is None:
            raise CliError("input", f"no posterior file for video {vid!r} in {post_dir}")
        if kp is None:
            raise CliError("input", f"no keypoint file for video {vid!r} in {kps_dir}")
        with phase("input"):
            post = read_posteriors(pp)
            frames = load_keypoints(kp, tree)
            post.encode(glosses)
        if post.class_names[0] != BLANK_NAME:
            raise CliError("input", f"{pp}: class 0 must be {BLANK_NAME!r}")
        if post.n_frames != len(frames):
            raise CliError("input", f"video {vid!r}: {post.n_frames} posterior rows but {len(frames)} keypoint frames")
        jobs.append((vid, glosses, post, frames, tree, run.cfg.schedule, run.cfg.weights, run.cfg.calibration))
    out = run.out_dir()
    workers = run.args.workers or run.cfg.workers
    with phase("computation"):
        results = _pool_map(_align_one, jobs, workers)
        videos = Dictionary(tree)
        samples = []
        for _, sign, s in results:
            videos.insert(sign)
            samples += s
    with phase("output"):
        doc = {"format": "signavatar-alignments", "version": 1, "videos": [r[0] for r in results]}
        (run.stage / "alignments.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        videos.save(run.stage / "videos")
        if samples:
            save_coarticulations(samples, run.stage / "coarticulations.bin", connector_hash(tree))
    run.result = {
        "videos": len(results),
        "segments": sum(len(r[0]["segments"]) for r in results),
        "coarticulations": len(samples),
    }
    run.finish(out)


def cmd_build_dict(run: Run) -> None:
    root = run.path("alignments", run.args.alignments, kind="dir")
    align_file = root / "alignments.json"
    if not align_file.is_file():
        raise CliError("input", f"no alignments.json in {root}")
    with phase("input"):
        doc = json.loads(align_file.read_text(encoding="utf-8"))
        videos = Dictionary.load(root / "videos")
    tree = videos.tree
    by_id = {s.gloss: s for s in videos.all_signs()}
    conf = None
    cpath = run.path("confidences", run.args.confidences, required=False)
    if cpath is not None:
        with phase("input"):
            conf = load_confidences(cpath)
    out = run.out_dir()
    with phase("computation"):
        book = Dictionary(tree)
        for v in doc["videos"]:
            if v["id"] not in by_id:
                raise CliError("input", f"no fitted frames for video {v['id']!r}")
            sign = by_id[v["id"]]
            cam = SharedCalibration.from_dict(v["calibration"]).camera
            for seg in v["segments"]:
                poses = sign.frames[seg["start"] : seg["end"] + 1]
                book.insert(
                    Sign3D.from_poses(
                        seg["gloss"], poses, tree, source=f"{v['id']}:{seg['start']}-{seg['end']}",
                        confidence=seg["score"], camera=cam,
                    )
                )
        if conf is not None:
            book.set_confidences(conf)
    with phase("output"):
        book.save(run.stage / "dictionary")
    run.result = {"glosses": book.glosses(), "signs": book.size}
    run.finish(out)


def cmd_train_connector(run: Run) -> None:
    tree = _tree(run)
    samples = []
    for k, raw in enumerate(run.args.coarticulations or [run.cfg.paths.get("coarticulations")]):
        p = run.path(f"coarticulations[{k}]", raw)
        with phase("input"):
            samples += load_coarticulations(p)
    width = len(tree.sets["connector"])
    if any(s.d_pre.shape[0] != width for s in samples):
        raise CliError("input", f"co-articulation samples do not match the {width} connector landmarks of the tree")
    out = run.out_dir()
    cfg = ConnectorTrainConfig.from_dict({**run.cfg.connector.to_dict(), "seed": run.cfg.seed})
    with phase("computation"):
        res = train_connector(samples, cfg, connector_hash(tree))
        l1 = evaluate_l1(res.model, samples)
    with phase("output"):
        save_model(res.model, run.stage / "connector.bin")
        write_training_log(res.trace, run.stage / "training_log.csv")
    run.result = {"samples": res.n_used, "filtered": res.n_filtered, "train_l1": l1}
    run.finish(out)


def _sentence(run: Run):
    a = run.args
    if (a.text is None) == (a.sentence_id is None):
        raise CliError("input", "pass exactly one of --text or --sentence-id")
    unknown = a.unknown or run.cfg.export["unknown"]
    if a.text is not None:
        lex = run.path("lexicon", a.lexicon)
        with phase("input"):
            return a.text, LexiconTranslator.from_file(lex, unknown)
    pred = run.path("predictions", a.predictions)
    with phase("input"):
        return a.sentence_id, FileTranslator.from_file(pred)


def cmd_translate(run: Run) -> None:
    text, translator = _sentence(run)
    droot = run.path("dictionary", run.args.dictionary, kind="dir")
    mpath = run.path("model", run.args.model, required=False)
    with phase("input"):
        book = Dictionary.load(droot)
        model = load_model(mpath) if mpath is not None else None
    mode = run.args.mode or run.cfg.export["mode"]
    fmts = run.args.format or run.cfg.export["formats"]
    unknown = run.args.unknown or run.cfg.export["unknown"]
    out = run.out_dir()
    with phase("computation"):
        res = translate(text, translator, book, model, mode, unknown)
        seq = res.sequence
        first = book.retrieve(seq.glosses[0])
        cam = first.camera or default_camera()
        naive = stitch([book.retrieve(g) for g in seq.glosses], None, book.tree, mode, [0] * (len(seq.glosses) - 1))
        tc = metric_tc(project_sequence(seq.joints, cam, book.tree)) if seq.n_frames > 1 else 1.0
        tc_naive = metric_tc(project_sequence(naive.joints, cam, book.tree)) if naive.n_frames > 1 else 1.0
    frame_time = run.cfg.export["frame_time"]
    names = {"bvh": "animation.bvh", "anim-json": "animation.json"}
    with phase("output"):
        for f in fmts:
            export_animation(seq, book.tree, f, run.stage / names[f], frame_time)
    run.result = {**res.manifest, "tc": tc, "tc_naive": tc_naive, "frame_time": frame_time}
    run.finish(out)
    for w in res.warnings:
        log.warning(w)


def cmd_eval(run: Run) -> None:
    pred_p = run.path("pred", run.args.pred)
    ref_p = run.path("ref", run.args.ref)
    with phase("input"):
        pred = load_keypoints(pred_p)
        ref = load_keypoints(ref_p)
    model = samples = None
    if run.args.model is not None and run.args.coarticulations is None:
        raise CliError("input", "connector evaluation needs --coarticulations")
    if run.args.coarticulations is not None:
        mp = run.path("model", run.args.model)  # flag or config paths.model
        cp = run.path("coarticulations", run.args.coarticulations)
        with phase("input"):
            model = load_model(mp)
            samples = load_coarticulations(cp)
    out = run.out_dir()
    with phase("computation"):
        report = {"2d_kl": metric_2d_kl(pred, ref), "tc": metric_tc(pred), "frames": len(pred)}
        if model is not None:
            kept = [s for s in samples if s.duration <= model.max_duration]
            fixed = fixed_duration(kept)
            report["connector_l1"] = evaluate_l1(model, kept)
            report["fixed_duration"] = fixed
            report["fixed_duration_l1"] = float(np.mean([abs(s.duration - fixed) for s in kept]))
    with phase("output"):
        (run.stage / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    run.result = report
    run.finish(out)
    print(f"2D KL: {report['2d_kl']:.2f}")
    print(f"TC: {report['tc']:.3f}")
    if "connector_l1" in report:
        print(f"connector L1: {report['connector_l1']:.3f} (fixed {report['fixed_duration_l1']:.3f})")


def _angle_tag(a: float) -> str:
    return f"{a:g}".replace("-", "m").replace(".", "p")


def cmd_augment(run: Run) -> None:
    droot = run.path("dictionary", run.args.dictionary, kind="dir")
    with phase("input"):
        book = Dictionary.load(droot)
    signs = book.all_signs()
    if run.args.gloss:
        missing = [g for g in run.args.gloss if g not in book]
        if missing:
            raise CliError("input", f"glosses not in the dictionary: {', '.join(missing)}")
        signs = [s for s in signs if s.gloss in run.args.gloss]
    aug = run.cfg.augment
    max_deg = aug["max_angle_deg"] if run.args.max_angle is None else run.args.max_angle
    if max_deg < 0:
        raise CliError("input", "augmentation range must be nonnegative")
    views = run.args.views if run.args.views is not None else aug["views_deg"]
    out = run.out_dir()
    deltas = {}
    with phase("computation"):
        staged = []
        for k, sign in enumerate(signs):
            cfg = AugmentConfig(math.radians(max_deg), tuple(aug["axis"]), run.cfg.seed + k)
            cam = sign.camera or default_camera()
            res = augment_3d(sign, cfg, cam, book.tree)
            deltas[sign.sign_id] = math.degrees(res.delta)
            staged.append((f"augmented/{sign.sign_id}.kps", res.keypoints))
            for ang, seq in zip(views, multiview_project(sign, cam, book.tree, views, tuple(aug["axis"]))):
                staged.append((f"views/{sign.sign_id}_{_angle_tag(ang)}.kps", seq))
    with phase("output"):
        (run.stage / "augmented").mkdir()
        (run.stage / "views").mkdir()
        for name, seq in staged:
            write_keypoints(seq, run.stage / name)
    run.result = {"delta_deg": deltas, "max_angle_deg": max_deg, "views_deg": list(views)}
    run.finish(out)


COMMANDS = {
    "calibrate": cmd_calibrate,
    "fit": cmd_fit,
    "align": cmd_align,
    "build-dict": cmd_build_dict,
    "train-connector": cmd_train_connector,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "augment": cmd_augment,
}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV})")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--tree", help="kinematic tree JSON (default: built-in 54-joint signer)")
    common.add_argument("--workers", type=int, help="parallel videos for fit and align")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="signavatar", description="Text to 3D sign animation toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[common], help="estimate shape, orientation and camera per video")
    p.add_argument("--keypoints", action="append", help="keypoint stream (repeatable)")

    p = sub.add_parser("fit", parents=[common], help="fit keypoint streams into a sign dictionary")
    p.add_argument("--keypoints", action="append", help="keypoint stream (repeatable)")
    p.add_argument("--gloss", action="append", help="gloss per keypoint stream (default: file stem)")
    p.add_argument("--calibration", help="calibration.json from the calibrate command")

    p = sub.add_parser("align", parents=[common], help="CTC alignment, segmentation and co-articulation mining")
    p.add_argument("--glosses", help="manifest of 'video-id gloss gloss ...' lines")
    p.add_argument("--posteriors", help="directory of <video-id>.post or .csv files")
    p.add_argument("--keypoints-dir", help="directory of <video-id>.kps files")

    p = sub.add_parser("build-dict", parents=[common], help="cut aligned segments into a dictionary")
    p.add_argument("--alignments", help="output directory of the align command")
    p.add_argument("--confidences", help="sidecar of 'sign-id score' lines")

    p = sub.add_parser("train-connector", parents=[common], help="train the transition-length model")
    p.add_argument("--coarticulations", action="append", help="co-articulation file (repeatable)")

    p = sub.add_parser("translate", parents=[common], help="text to stitched animation")
    p.add_argument("--text")
    p.add_argument("--sentence-id")
    p.add_argument("--lexicon", help="'word<TAB>gloss' table")
    p.add_argument("--predictions", help="'sentence-id<TAB>gloss ...' table")
    p.add_argument("--dictionary")
    p.add_argument("--model")
    p.add_argument("--format", action="append", choices=EXPORT_FORMATS)
    p.add_argument("--mode", choices=("pose", "joint"))
    p.add_argument("--unknown", choices=("skip", "error"))

    p = sub.add_parser("eval", parents=[common], help="2D keypoint distance, temporal consistency, connector L1")
    p.add_argument("--pred")
    p.add_argument("--ref")
    p.add_argument("--model")
    p.add_argument("--coarticulations")

    p = sub.add_parser("augment", parents=[common], help="rotated and multi-view keypoint dumps")
    p.add_argument("--dictionary")
    p.add_argument("--gloss", action="append")
    p.add_argument("--max-angle", type=float, help="degrees")
    p.add_argument("--views", type=float, nargs="+", help="view angles in degrees")
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    rn = None
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None and args.workers < 1:
            raise CliError("input", "workers must be at least 1")
        rn = Run(args.command, args, cfg)
        COMMANDS[args.command](rn)
    except CliError as exc:
        print(f"signavatar {args.command}: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT[exc.category]
    except FormatError as exc:  # pragma: no cover - normally wrapped by phase()
        print(f"signavatar {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT["input"]
    finally:
        if rn is not None:
            rn.close()
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
