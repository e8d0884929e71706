"""Pipeline command line: dataset generation, path synthesis, training,
inference, evaluation and mesh export as reproducible subcommands.

Config layering: built-in defaults < --config file < explicit flags.  Every
command writes the fully resolved config beside its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ded
from .errors import LarecoError
from .grid import (
    GridSpec,
    OccupancyVolume,
    ScalarField,
    load_volume,
    marching_cubes,
    mean_shape,
    save_volume,
)
from .mesh import (
    load_landmarks,
    load_obj,
    nearest_vertex,
    rigid_register,
    save_landmarks,
    save_obj,
)
from .metrics import compare_to_mean_shape
from .pathgen import (
    AugmentConfig,
    DEFAULT_ALPHAS,
    augment_path,
    compose_path,
    load_path_csv,
    path_to_volume,
    project_landmarks,
    save_path_csv,
)
from .shapegen import (
    AtriumParams,
    default_mvn_spec,
    landmarks_of,
    load_mvn_spec,
)
from . import shapegen

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    grid_n: int = 24
    spacing_mm: float = 4.0
    mvn_spec_path: str | None = None
    n_train: int = 200
    n_test: int = 50
    alphas: tuple = DEFAULT_ALPHAS
    augment_n: int = 6
    augment_sigma: float = 4.0
    augment_s_f: float = 0.5
    augment_mu_s: float = 2.0
    pv_walk_eps: float = 0.2
    septum_sigma: float = 3.0
    hidden_sizes: tuple = (64, 64)
    epochs: int = 50
    batch_size: int = 16
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    ce_weight: float = 0.4
    dice_weight: float = 0.6
    lambda_swr: float = 0.0
    use_boundary_mask: bool = True
    mask_alpha: float = 14.0
    mask_sigma: float = 1.5
    input_mask_prob: float = 0.1
    seed: int = 0

    def grid(self) -> GridSpec:
        return GridSpec.centered(self.grid_n, self.spacing_mm)

    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.augment_n, self.augment_sigma,
                             self.augment_s_f, self.augment_mu_s)

    def loss(self) -> ded.LossConfig:
        return ded.LossConfig(
            ce_weight=self.ce_weight, dice_weight=self.dice_weight,
            lambda_swr=self.lambda_swr, use_boundary_mask=self.use_boundary_mask,
            mask_alpha=self.mask_alpha, mask_sigma=self.mask_sigma,
            input_mask_prob=self.input_mask_prob,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["alphas"] = list(self.alphas)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @staticmethod
    def resolve(args) -> "PipelineConfig":
        cfg = PipelineConfig()
        if getattr(args, "config", None):
            with open(args.config) as f:
                file_cfg = json.load(f)
            unknown = set(file_cfg) - {f.name for f in dataclasses.fields(PipelineConfig)}
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
            cfg = dataclasses.replace(cfg, **file_cfg)
        overrides = {}
        mapping = {
            "seed": "seed", "grid": "grid_n", "spacing_mm": "spacing_mm",
            "n_train": "n_train", "n_test": "n_test", "epochs": "epochs",
            "batch_size": "batch_size", "lr": "lr", "lambda_swr": "lambda_swr",
            "input_mask_prob": "input_mask_prob", "mvn_spec": "mvn_spec_path",
            "augment_n": "augment_n",
        }
        for arg_name, field_name in mapping.items():
            val = getattr(args, arg_name, None)
            if val is not None:
                overrides[field_name] = val
        if getattr(args, "alphas", None):
            overrides["alphas"] = tuple(args.alphas)
        if getattr(args, "hidden", None):
            overrides["hidden_sizes"] = tuple(args.hidden)
        if getattr(args, "no_boundary_mask", False):
            overrides["use_boundary_mask"] = False
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
        cfg = dataclasses.replace(cfg, alphas=tuple(cfg.alphas),
                                  hidden_sizes=tuple(cfg.hidden_sizes))
        return cfg


def _write_json(path, payload) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def _write_resolved_config(out_dir: Path, cfg: PipelineConfig) -> None:
    _write_json(out_dir / "config.resolved.json", cfg.to_dict())


def _load_spec(cfg: PipelineConfig):
    if cfg.mvn_spec_path:
        return load_mvn_spec(cfg.mvn_spec_path)
    try:
        return load_mvn_spec()
    except FileNotFoundError:
        return default_mvn_spec()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_shapes(args) -> int:
    cfg = PipelineConfig.resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = _load_spec(cfg)
    grid = cfg.grid()
    splits = [("train", cfg.n_train, cfg.seed), ("test", cfg.n_test, cfg.seed + 1)]
    train_vols = None
    for split, n, seed in splits:
        if n <= 0:
            continue
        samples, manifest = shapegen.generate_dataset(spec, grid, n, seed)
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        for entry, (vol, mesh, lms, _params) in zip(manifest["samples"], samples):
            sdir = split_dir / entry["id"]
            sdir.mkdir(exist_ok=True)
            save_volume(sdir / "shape", vol)
            save_obj(sdir / "shape.obj", mesh)
            save_landmarks(sdir / "landmarks.json", lms)
        if split == "train":
            train_vols = [s[0] for s in samples]
            field, mvol = mean_shape(train_vols)
            save_volume(split_dir / "mean_field", field)
            save_volume(split_dir / "mean_shape", mvol)
            mean_mesh = marching_cubes(field, 0.5)
            save_obj(split_dir / "mean_mesh.obj", mean_mesh)
            # reference landmarks: mean-parameter shape (no warp), snapped to
            # the mean-mesh vertices
            ref = landmarks_of(AtriumParams.from_vector(_zero_warp(spec.mean)))
            snapped = {name: mean_mesh.vertices[nearest_vertex(mean_mesh, getattr(ref, name))]
                       for name in ("pv_ls", "pv_li", "pv_ri", "pv_rs", "septum")}
            save_landmarks(split_dir / "mean_landmarks.json", type(ref)(**snapped))
        _write_json(split_dir / "manifest.json", manifest)
    _write_resolved_config(out, cfg)
    print(f"gen-shapes: wrote {cfg.n_train} train + {cfg.n_test} test samples to {out}")
    return 0


def _zero_warp(mean_vec):
    vec = np.array(mean_vec, dtype=float)
    vec[-1] = 0.0  # warp amplitude is the last parameter
    return vec


def _sample_dirs(split_dir: Path) -> list:
    return sorted(d for d in split_dir.iterdir() if d.is_dir() and d.name.isdigit())


def _find_mean_dir(dataset: Path, override) -> Path:
    if override:
        return Path(override)
    if (dataset / "mean_mesh.obj").exists():
        return dataset
    sibling = dataset.parent / "train"
    if (sibling / "mean_mesh.obj").exists():
        return sibling
    raise FileNotFoundError("no mean shape found; pass --mean-dir")


def cmd_gen_paths(args) -> int:
    cfg = PipelineConfig.resolve(args)
    dataset = Path(args.dataset)
    mean_dir = _find_mean_dir(dataset, getattr(args, "mean_dir", None))
    mean_mesh = load_obj(mean_dir / "mean_mesh.obj")
    mean_lms = load_landmarks(mean_dir / "mean_landmarks.json")
    aug = cfg.augment()
    failures = []
    sample_dirs = _sample_dirs(dataset)
    for i, sdir in enumerate(sample_dirs):
        try:
            vol = load_volume(sdir / "shape")
            mesh = load_obj(sdir / "shape.obj")
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, i]))
            lms = project_landmarks(mean_mesh, mean_lms, mesh, cfg.pv_walk_eps,
                                    septum_sigma=cfg.septum_sigma, rng=rng)
            path = compose_path(vol, lms, cfg.alphas)
            path = augment_path(path, vol, aug, rng)
            save_path_csv(sdir / "path.csv", path)
            save_volume(sdir / "path", path_to_volume(path, vol.grid))
        except LarecoError as exc:
            log.error("sample %s failed: %s", sdir.name, exc)
            failures.append(sdir.name)
    manifest_path = dataset / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    manifest["paths"] = {
        "alphas": list(cfg.alphas), "augment": aug.to_dict(),
        "pv_walk_eps": cfg.pv_walk_eps, "septum_sigma": cfg.septum_sigma,
        "seed": cfg.seed, "failures": failures,
    }
    _write_json(manifest_path, manifest)
    n_ok = len(sample_dirs) - len(failures)
    print(f"gen-paths: {n_ok}/{len(sample_dirs)} samples succeeded")
    return 0 if not failures else 1


def _load_pairs(split_dir: Path):
    pairs, ids = [], []
    for sdir in _sample_dirs(split_dir):
        if not (sdir / "path.vol.json").exists():
            continue
        pairs.append((load_volume(sdir / "path"), load_volume(sdir / "shape")))
        ids.append(sdir.name)
    return pairs, ids


def cmd_train(args) -> int:
    cfg = PipelineConfig.resolve(args)
    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs, _ = _load_pairs(data)
    if not pairs:
        raise LarecoError(f"no (path, shape) pairs found under {data}")
    grid = pairs[0][0].grid
    model, metrics = ded.train(
        pairs, grid, hidden_sizes=cfg.hidden_sizes, cfg=cfg.loss(),
        epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed,
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps_adam=cfg.eps_adam,
    )
    ded.save_checkpoint(out / "model", model, cfg.loss(), cfg.seed)
    with open(out / "metrics.jsonl", "w") as f:
        for row in metrics:
            json.dump(row, f, sort_keys=True, separators=(",", ":"))
            f.write("\n")
    _write_resolved_config(out, cfg)
    last = metrics[-1] if metrics else {}
    print(f"train: {cfg.epochs} epochs, final train dice "
          f"{last.get('train_dice', float('nan')):.4f}")
    return 0


def cmd_infer(args) -> int:
    cfg = PipelineConfig.resolve(args)
    model = ded.load_checkpoint(Path(args.model))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if getattr(args, "path_csv", None):
        # external path: register its PV ostia onto the mean-shape frame
        mean_dir = _find_mean_dir(Path(args.mean_dir), None) if args.mean_dir else None
        if mean_dir is None:
            raise LarecoError("external path inference requires --mean-dir")
        mean_lms = load_landmarks(mean_dir / "mean_landmarks.json")
        ext_lms = load_landmarks(Path(args.landmarks))
        transform = rigid_register(ext_lms.pv_array(), mean_lms.pv_array())
        path = load_path_csv(args.path_csv)
        moved = type(path)(transform.apply(path.points), path.sections)
        pvol = path_to_volume(moved, model.grid)
        prob, binary = ded.infer(model, pvol)
        save_volume(out / "recon", binary)
        save_volume(out / "prob", prob)
        save_volume(out / "input_path", pvol)
        _write_json(out / "registration.json", {
            "rotation": transform.rotation.tolist(),
            "translation": transform.translation.tolist(),
        })
        print(f"infer: external path reconstructed into {out}")
    else:
        data = Path(args.data)
        n = 0
        for sdir in _sample_dirs(data):
            if not (sdir / "path.vol.json").exists():
                continue
            pvol = load_volume(sdir / "path")
            prob, binary = ded.infer(model, pvol)
            rdir = out / sdir.name
            rdir.mkdir(exist_ok=True)
            save_volume(rdir / "recon", binary)
            save_volume(rdir / "prob", prob)
            n += 1
        print(f"infer: reconstructed {n} samples into {out}")
    _write_resolved_config(out, cfg)
    return 0


def cmd_eval(args) -> int:
    cfg = PipelineConfig.resolve(args)
    recon_dir = Path(args.recon)
    data = Path(args.data)
    mean_dir = _find_mean_dir(data, getattr(args, "mean_dir", None))
    mean_vol = load_volume(mean_dir / "mean_shape")
    recons, truths, ids = [], [], []
    for sdir in _sample_dirs(data):
        rfile = recon_dir / sdir.name / "recon"
        if not Path(str(rfile) + ".vol.json").exists():
            continue
        recons.append(load_volume(rfile))
        truths.append(load_volume(sdir / "shape"))
        ids.append(sdir.name)
    if not recons:
        raise LarecoError("no matching reconstructions found")
    report = compare_to_mean_shape(recons, truths, mean_vol, ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save_json(out / "report.json")
    report.save_csv(out / "report.csv")
    _write_resolved_config(out, cfg)
    base = report.baseline
    print(f"eval: dice {report.dice:.4f} (mean shape {base['dice']:.4f}), "
          f"avdist {report.avdist_mm:.3f} mm (mean shape {base['avdist_mm']:.3f} mm)")
    return 0


def cmd_export_mesh(args) -> int:
    obj = load_volume(args.input)
    if isinstance(obj, OccupancyVolume):
        field = ScalarField(obj.grid, obj.data.astype(float))
    else:
        field = obj
    mesh = marching_cubes(field, args.iso)
    save_obj(args.out, mesh)
    print(f"export-mesh: {mesh.n_vertices} vertices, {len(mesh.faces)} faces -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--grid", type=int, help="cubic grid size (voxels per axis)")
    p.add_argument("--spacing-mm", dest="spacing_mm", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lareco",
                                     description="Left-atrium shape completion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-shapes", help="generate synthetic atrium datasets")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--mvn-spec", dest="mvn_spec", help="MVN spec JSON file")
    p.set_defaults(func=cmd_gen_shapes)

    p = sub.add_parser("gen-paths", help="synthesize catheter paths for a dataset split")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="dataset split directory")
    p.add_argument("--mean-dir", dest="mean_dir")
    p.add_argument("--alphas", type=float, nargs=4)
    p.add_argument("--augment-n", dest="augment_n", type=int)
    p.set_defaults(func=cmd_gen_paths)

    p = sub.add_parser("train", help="train the dense encoder-decoder")
    _add_common(p)
    p.add_argument("--data", required=True, help="split directory with paths")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-swr", dest="lambda_swr", type=float)
    p.add_argument("--hidden", type=int, nargs="+")
    p.add_argument("--input-mask-prob", dest="input_mask_prob", type=float)
    p.add_argument("--no-boundary-mask", dest="no_boundary_mask", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="reconstruct shapes from path volumes")
    _add_common(p)
    p.add_argument("--model", required=True, help="checkpoint base path (no extension)")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="split directory with path volumes")
    p.add_argument("--path-csv", dest="path_csv", help="external path CSV")
    p.add_argument("--landmarks", help="external landmarks JSON (with --path-csv)")
    p.add_argument("--mean-dir", dest="mean_dir")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate reconstructions against ground truth")
    _add_common(p)
    p.add_argument("--recon", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mean-dir", dest="mean_dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-mesh", help="marching-cubes surface from a volume file")
    _add_common(p)
    p.add_argument("--input", required=True, help="volume base path (no .vol.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--iso", type=float, default=0.5)
    p.set_defaults(func=cmd_export_mesh)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (LarecoError, OSError, ValueError, FileNotFoundError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
