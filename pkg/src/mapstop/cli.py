"""mapstop command line: gen -> explore -> label -> train -> eval, plus gradcam.

Workspace layout::

    config.json          pipeline parameters (env, sensor, robot, label)
    envs/                envs.json, split.json, env###.pgm ground truth
    runs/<mode>/         <env>/run_<seed>/snap_####.pgm + run.json, runs.json index
    dataset/<mode>.csv   one labeled row per snapshot
    models/              model.ckpt, curves.csv
    reports/             evaluation CSV/JSON
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import eval as ev
from .gridmap import PgmFormatError, load_pgm, save_gray, save_pgm, save_ppm, to_image
from .labeler import Label, LabelParams, label_map
from .net.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .net.data import Record, load_images, read_manifest, split_by_env, write_manifest
from .net.gradcam import grad_cam
from .net.model import clamp_area
from .net.train import TrainConfig, TrainingError, train
from .sim.envgen import EnvParams, Environment, GenerationError, generate_environment
from .sim.explore import ExplorationRun, RobotConfig, explore
from .sim.sensor import SensorConfig
from .stopping import parse_criterion

log = logging.getLogger("mapstop")

SNAPSHOT_EVERY = {"batch": 60.0, "online": 5.0}
DEFAULT_STOP = "baseline:interval=60,tau=0"
MAX_ATTEMPTS = 5  # baseline stops that leave the map unexplored are re-run with a new seed


class DataError(Exception):
    """Missing or malformed upstream artifact; exit code 3."""


@dataclass
class PipelineConfig:
    env: EnvParams = field(default_factory=EnvParams)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    robot: RobotConfig = field(default_factory=RobotConfig)
    label: LabelParams = field(default_factory=LabelParams)
    seed: int = 0

    def to_dict(self):
        return {"env": self.env.to_dict(), "sensor": asdict(self.sensor), "robot": asdict(self.robot),
                "label": asdict(self.label), "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(EnvParams.from_dict(d["env"]), SensorConfig(**d["sensor"]), RobotConfig(**d["robot"]),
                   LabelParams(**d["label"]), int(d.get("seed", 0)))

    def save(self, ws):
        _write_json(Path(ws) / "config.json", self.to_dict())

    @classmethod
    def load(cls, ws):
        path = Path(ws) / "config.json"
        if not path.exists():
            return cls()
        return cls.from_dict(json.loads(path.read_text()))


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing {path}")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# gen

def cmd_gen(ws, n, seed=0, params: EnvParams | None = None, split_seed=None):
    ws = Path(ws)
    cfg = PipelineConfig.load(ws)
    cfg.env = params or cfg.env
    cfg.seed = seed
    cfg.save(ws)
    out = ws / "envs"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n):
        env_seed = seed * 100_003 + i
        env = generate_environment(env_seed, cfg.env)
        env_id = f"env{i:03d}"
        save_pgm(env.truth, out / f"{env_id}.pgm")
        rows.append({"env_id": env_id, "seed": env_seed, "pgm_path": f"envs/{env_id}.pgm", **env.meta})
    _write_json(out / "envs.json", {"params": cfg.env.to_dict(), "envs": rows})
    if n >= 3:
        split = split_by_env([r["env_id"] for r in rows], seed=seed if split_seed is None else split_seed)
        _write_json(out / "split.json", split)
    return rows


def _env_rows(ws):
    return _read_json(Path(ws) / "envs" / "envs.json")["envs"]


def load_env(ws, row):
    path = Path(ws) / row["pgm_path"]
    if not path.exists():
        raise DataError(f"missing environment file {path}")
    return Environment(load_pgm(path), int(row["seed"]))


def select_envs(ws, split=None, env_ids=None):
    rows = _env_rows(ws)
    if env_ids:
        keep = set(env_ids)
        unknown = keep - {r["env_id"] for r in rows}
        if unknown:
            raise DataError(f"unknown environments {sorted(unknown)}")
        return [r for r in rows if r["env_id"] in keep]
    if split:
        parts = _read_json(Path(ws) / "envs" / "split.json")
        names = set()
        for s in split.split(","):
            if s not in parts:
                raise DataError(f"no split named {s!r}")
            names |= set(parts[s])
        return [r for r in rows if r["env_id"] in names]
    return rows


# ---------------------------------------------------------------------------
# explore

def _explore_task(task):
    ws, row, run_index, run_seed, mode, stop_spec, cfg_dict = task
    cfg = PipelineConfig.from_dict(cfg_dict)
    env = load_env(ws, row)
    full = env.reference_map()
    run = None
    for attempt in range(MAX_ATTEMPTS):
        seed = run_seed + 1000 * attempt
        stop = parse_criterion(stop_spec)
        hold = not stop_spec.startswith("nofrontiers")
        run = explore(env, cfg.sensor, cfg.robot, stop, SNAPSHOT_EVERY[mode], seed, row["env_id"], hold=hold)
        # acceptance check standing in for manual inspection of baseline stops
        if label_map(run.final_map, full, cfg.label).label is Label.EXPLORED:
            break
        log.warning("%s seed %d: stop at %.0fs left the map unexplored; retrying", row["env_id"], seed,
                    run.total_time)
    run_dir = Path(ws) / "runs" / mode / row["env_id"] / f"run_{run_index:02d}"
    run.save(run_dir)
    return {"env_id": row["env_id"], "run_id": f"run_{run_index:02d}", "seed": run.seed,
            "manifest": str(run_dir.relative_to(ws) / "run.json"), "T_seconds": run.total_time,
            "terminal_reason": run.terminal_reason, "snapshots": len(run.snapshots)}


def cmd_explore(ws, mode="batch", runs_per_env=5, seed=0, stop=DEFAULT_STOP, split=None, env_ids=None, jobs=1):
    ws = Path(ws)
    if mode not in SNAPSHOT_EVERY:
        raise ValueError(f"unknown mode {mode!r}")
    parse_criterion(stop)  # fail early on a bad spec
    cfg = PipelineConfig.load(ws)
    rows = select_envs(ws, split, env_ids)
    tasks = []
    for row in rows:
        for r in range(runs_per_env):
            run_seed = seed * 7919 + int(row["seed"]) * 31 + r
            tasks.append((str(ws), row, r, run_seed, mode, stop, cfg.to_dict()))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            index = list(pool.map(_explore_task, tasks))
    else:
        index = [_explore_task(t) for t in tasks]
    _write_json(ws / "runs" / mode / "runs.json", {"mode": mode, "stop": stop, "runs": index})
    return index


def load_runs(ws, mode):
    ws = Path(ws)
    index = _read_json(ws / "runs" / mode / "runs.json")["runs"]
    out = []
    for item in index:
        path = ws / item["manifest"]
        if not path.exists():
            raise DataError(f"missing run manifest {path}")
        out.append((item, ExplorationRun.load(path)))
    return out


# ---------------------------------------------------------------------------
# label

def cmd_label(ws, mode="batch"):
    ws = Path(ws)
    cfg = PipelineConfig.load(ws)
    envs = {r["env_id"]: r for r in _env_rows(ws)}
    refs = {}
    records = []
    for item, run in load_runs(ws, mode):
        env_id = item["env_id"]
        if env_id not in refs:
            refs[env_id] = load_env(ws, envs[env_id]).reference_map()
        run_dir = Path(item["manifest"]).parent
        for i, snap in enumerate(run.snapshots):
            lab = label_map(snap.map, refs[env_id], cfg.label)
            records.append(Record(env_id, item["run_id"], snap.t, str(run_dir / f"snap_{i:04d}.pgm"),
                                  lab.label, lab.area_ratio, lab.largest_cluster_m2))
    write_manifest(records, ws / "dataset" / f"{mode}.csv")
    return records


def _dataset(ws, mode, split_names, side):
    ws = Path(ws)
    path = ws / "dataset" / f"{mode}.csv"
    if not path.exists():
        raise DataError(f"missing dataset {path}; run `mapstop label --mode {mode}` first")
    records = read_manifest(path)
    parts = _read_json(ws / "envs" / "split.json")
    out = {}
    for name in split_names:
        keep = set(parts[name])
        recs = [r for r in records if r.env_id in keep]
        for r in recs:
            if not (ws / r.pgm_path).exists():
                raise DataError(f"missing snapshot {ws / r.pgm_path}")
        out[name] = (recs, load_images(recs, ws, side))
    return out


# ---------------------------------------------------------------------------
# train

def cmd_train(ws, config: TrainConfig = TrainConfig(), mode="batch"):
    ws = Path(ws)
    data = _dataset(ws, mode, ("train", "val"), config.input_side)
    (tr, xtr), (va, xva) = data["train"], data["val"]
    ytr = [int(r.label) for r in tr]
    atr = [r.A_t for r in tr]
    result = train(xtr, ytr, atr, xva, [int(r.label) for r in va], [r.A_t for r in va], config,
                   curves_path=ws / "models" / "curves.csv")
    save_checkpoint(result.model, ws / "models" / "model.ckpt",
                    extra={"train": config.to_dict(), "best_epoch": result.best_epoch,
                           "best_val_acc": result.best_val_acc, "n_train": len(tr), "n_val": len(va)})
    return result


def _load_model(ws, path=None):
    path = Path(path) if path else Path(ws) / "models" / "model.ckpt"
    if not path.exists():
        raise DataError(f"missing model checkpoint {path}")
    model, _ = load_checkpoint(path)
    return model


# ---------------------------------------------------------------------------
# eval

def cmd_eval(ws, mode="batch", thetas=(0.5, 0.8), k=1, model_path=None, split="test"):
    ws = Path(ws)
    model = _load_model(ws, model_path)
    side = model.input_side
    reports = {}
    out = ws / "reports"
    table1 = []
    if mode == "batch":
        recs, imgs = _dataset(ws, "batch", (split,), side)[split]
        if not recs:
            raise DataError(f"no {split} snapshots in the batch dataset")
        p, a_raw = model.predict(imgs)
        for th in thetas:
            rep = ev.batch_eval(recs, p, a_raw, th)
            reports[th] = rep
            table1.append({"theta": th, **{k2: rep.overall[k2] for k2 in
                                          ("TE", "FE", "TN", "FN", "accuracy", "precision", "recall", "fe_rate")}})
        main = reports[thetas[0]]
        ev.write_rows([{**r} for r in main.rows], out / "batch_table2.csv")
        main.write_runs_csv(out / "batch_runs.csv")
        ev.write_rows(ev.area_error_curve([r.A_t for r in recs], a_raw), out / "area_error_curve.csv")
        ev.write_rows([{"env_id": r.env_id, "run_id": r.run_id, "t_seconds": r.t_seconds, "label": int(r.label),
                        "A_t": r.A_t, "p_explored": float(pi), "A_hat": float(clamp_area(ai))}
                       for r, pi, ai in zip(recs, p, a_raw)], out / "batch_predictions.csv")
    elif mode == "online":
        cfg = PipelineConfig.load(ws)
        envs = {r["env_id"]: r for r in _env_rows(ws)}
        refs = {}
        runs = []
        for item, run in load_runs(ws, "online"):
            env_id = item["env_id"]
            if env_id not in refs:
                refs[env_id] = load_env(ws, envs[env_id]).reference_map()
            runs.append((run, refs[env_id]))
        if not runs:
            raise DataError("no online runs recorded")
        for th in thetas:
            rep = ev.online_eval(runs, model, th, k, cfg.label, side)
            reports[th] = rep
            table1.append({"theta": th, **{k2.replace("info_", ""): rep.overall[k2] for k2 in
                                          ("info_TE", "info_FE", "info_TN", "info_FN", "info_accuracy",
                                           "info_precision", "info_recall")}})
        main = reports[thetas[0]]
        main.write_csv(out / "online_table2.csv")
        main.write_runs_csv(out / "online_runs.csv")
        for th, rep in reports.items():
            rep.write_runs_csv(out / f"online_runs_theta{th:g}.csv")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    ev.write_rows(table1, out / f"{mode}_table1.csv")
    summary = {f"{th:g}": ev._clean(rep.summary) for th, rep in reports.items()}
    _write_json(out / f"{mode}_summary.json", {"mode": mode, "k": k, "by_theta": summary})
    return reports


# ---------------------------------------------------------------------------
# gradcam

def heat_overlay(pixels, heat):
    """Gray map with the heatmap blended into the red channel."""
    gray = np.asarray(pixels, dtype=np.float64)
    rgb = np.stack([gray, gray, gray], axis=-1) * 0.6
    rgb[..., 0] += 0.4 * heat
    rgb[..., 1] += 0.4 * (1 - heat) * gray
    rgb[..., 2] += 0.4 * (1 - heat) * gray
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)


def cmd_gradcam(ws, maps, out_dir, model_path=None, target=int(Label.NOT_EXPLORED)):
    ws = Path(ws)
    model = _load_model(ws, model_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in maps:
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing map {path}")
        img = to_image(load_pgm(path), model.input_side)
        p, a_raw = model.predict(img.pixels[None])
        heat = grad_cam(model, img, target)
        stem = path.stem if path.parent.name == "" else f"{path.parent.name}_{path.stem}"
        save_gray(heat, out_dir / f"{stem}_cam.pgm")
        save_ppm(heat_overlay(img.pixels, heat), out_dir / f"{stem}_overlay.ppm")
        rows.append({"map": str(path), "p_explored": float(p[0]), "A_hat": float(clamp_area(a_raw[0])),
                     "label": str(Label.EXPLORED if p[0] >= 0.5 else Label.NOT_EXPLORED)})
    ev.write_rows(rows, out_dir / "gradcam.csv")
    return rows


# ---------------------------------------------------------------------------
# argparse

def build_parser():
    ap = argparse.ArgumentParser(prog="mapstop", description=__doc__.splitlines()[0])
    ap.add_argument("--workspace", "-w", default="workspace", help="workspace directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--verbose", "-v", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate floor plans")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--rooms-min", type=int)
    g.add_argument("--rooms-max", type=int)
    g.add_argument("--extent", type=int, nargs=2, metavar=("ROWS", "COLS"))
    g.add_argument("--resolution", type=float)

    e = sub.add_parser("explore", help="simulate exploration runs")
    e.add_argument("--mode", choices=sorted(SNAPSHOT_EVERY), default="batch")
    e.add_argument("--runs-per-env", type=int, default=5)
    e.add_argument("--stop", default=DEFAULT_STOP, help="criterion spec, e.g. baseline:interval=60,tau=0")
    e.add_argument("--split", help="comma-separated split names (train,val,test)")
    e.add_argument("--env-ids", help="comma-separated environment ids")

    lb = sub.add_parser("label", help="label every snapshot against the complete map")
    lb.add_argument("--mode", choices=sorted(SNAPSHOT_EVERY), default="batch")

    t = sub.add_parser("train", help="train the two-head network")
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    t.add_argument("--lam", type=float, default=TrainConfig.lam)
    t.add_argument("--image-side", type=int, default=TrainConfig.input_side)
    t.add_argument("--widths", default="16,32,64,64")
    t.add_argument("--separate-heads", action="store_true")
    t.add_argument("--no-augment", action="store_true")

    v = sub.add_parser("eval", help="batch or online evaluation on the test split")
    v.add_argument("--mode", choices=sorted(SNAPSHOT_EVERY), default="batch")
    v.add_argument("--theta", type=float, action="append", help="repeatable; first is the main one")
    v.add_argument("--k", type=int, default=1)
    v.add_argument("--model")
    v.add_argument("--split", default="test")

    c = sub.add_parser("gradcam", help="saliency overlays for map PGMs")
    c.add_argument("maps", nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--model")
    c.add_argument("--target", choices=["explored", "not-explored"], default="not-explored")
    c.add_argument("--image-side", type=int, help="must match the model; checked")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ws = Path(args.workspace)
    try:
        if args.cmd == "gen":
            if args.n < 0:
                ap.error("--n must be >= 0")
            p = PipelineConfig.load(ws).env
            kw = {}
            if args.rooms_min is not None:
                kw["rooms_min"] = args.rooms_min
            if args.rooms_max is not None:
                kw["rooms_max"] = args.rooms_max
            if args.extent:
                kw["extent"] = tuple(args.extent)
            if args.resolution:
                kw["cell_resolution"] = args.resolution
            params = EnvParams.from_dict({**p.to_dict(), **kw})
            try:
                params.validate()
            except ValueError as exc:
                ap.error(str(exc))
            rows = cmd_gen(ws, args.n, args.seed, params)
            print(f"generated {len(rows)} environments in {ws / 'envs'}")
        elif args.cmd == "explore":
            if args.runs_per_env < 0:
                ap.error("--runs-per-env must be >= 0")
            try:
                parse_criterion(args.stop)
            except ValueError as exc:
                ap.error(str(exc))
            ids = args.env_ids.split(",") if args.env_ids else None
            index = cmd_explore(ws, args.mode, args.runs_per_env, args.seed, args.stop, args.split, ids, args.jobs)
            print(f"recorded {len(index)} {args.mode} runs")
        elif args.cmd == "label":
            recs = cmd_label(ws, args.mode)
            n_e = sum(r.label is Label.EXPLORED for r in recs)
            print(f"labeled {len(recs)} snapshots ({n_e} explored)")
        elif args.cmd == "train":
            widths = tuple(int(x) for x in args.widths.split(","))
            cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.lr,
                              lam=args.lam, seed=args.seed, input_side=args.image_side, widths=widths,
                              separate_heads=args.separate_heads,
                              rotate=not args.no_augment, zoom=None if args.no_augment else (0.9, 1.1))
            res = cmd_train(ws, cfg)
            print(f"best epoch {res.best_epoch}: val accuracy {res.best_val_acc:.3f}")
        elif args.cmd == "eval":
            thetas = tuple(args.theta) if args.theta else (0.5, 0.8)
            for th in thetas:
                if not 0 < th < 1:
                    ap.error("--theta must lie in (0, 1)")
            if args.k < 1:
                ap.error("--k must be >= 1")
            reps = cmd_eval(ws, args.mode, thetas, args.k, args.model, args.split)
            for th, rep in reps.items():
                o = rep.overall
                if args.mode == "batch":
                    print(f"theta={th:g}: accuracy {o['accuracy']:.3f} FE {o['FE']} err_A {o['err_A']:.3f} "
                          f"delta_t_hat {o['delta_t_hat']:.3f}")
                else:
                    print(f"theta={th:g}: delta_t_hat {o['delta_t_hat']:.3f} err_t {o['err_t']:.3f} "
                          f"A>=0.95 in {o['frac_A_ge_0.95']:.2f} of runs")
        elif args.cmd == "gradcam":
            target = int(Label.parse(args.target))
            model_side = _load_model(ws, args.model).input_side
            if args.image_side and args.image_side != model_side:
                ap.error(f"--image-side {args.image_side} does not match the model ({model_side})")
            rows = cmd_gradcam(ws, args.maps, args.out, args.model, target)
            print(f"wrote {len(rows)} saliency overlays to {args.out}")
    except (DataError, FileNotFoundError, PgmFormatError, CheckpointError, GenerationError, TrainingError,
            KeyError, ValueError) as exc:
        print(f"mapstop: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
