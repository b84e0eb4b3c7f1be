"""Command-line entry point for the synthetic pipeline.

    spectral-tokens gen-data       --config run.cfg
    spectral-tokens pretrain       --seed 0
    spectral-tokens train-adapter  --set preset=set
    spectral-tokens eval           --set adapters=checkpoints/adapters-set-seed0.ckpt --set preset=set
    spectral-tokens ablate
    spectral-tokens gradcheck
    spectral-tokens spectral-dump  --set image=data/source/00000.bin

Every command writes ``run_config.txt`` (the merged effective config) next to
its outputs. Existing outputs are only replaced with ``--force``.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import adapter as A
from . import checkpoint, checks, config, spectral
from . import data as D
from . import train as TR
from .backbone import BackboneConfig, SegmentationModel, TrainingDiverged, init_model, pretrain
from .tensor import Tensor

log = logging.getLogger("spectral_tokens")

COMMANDS = ("gen-data", "pretrain", "train-adapter", "eval", "ablate", "gradcheck", "spectral-dump")
BACKBONE_FILE = "backbone.ckpt"
META_KEYS = ("channels", "patch", "d", "layers", "classes", "image_size")


class CommandError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# file helpers


def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CommandError(f"{path} exists and is not empty (use --force to replace it)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _guard_file(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise CommandError(f"{path} exists (use --force to replace it)")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(cfg: config.RunConfig, directory: Path) -> None:
    (directory / "run_config.txt").write_text(cfg.to_text())


def save_backbone(path: Path, model: SegmentationModel) -> None:
    arrays = dict(model.state())
    for key, value in asdict(model.config).items():
        arrays[f"meta.{key}"] = np.float64(value)
    checkpoint.save(path, arrays)


def load_backbone(path: Path) -> SegmentationModel:
    arrays = checkpoint.load(path)
    meta = {k: int(arrays.pop(f"meta.{k}")) for k in META_KEYS}
    return SegmentationModel.from_state(BackboneConfig(**meta), arrays)


def save_adapters(path: Path, params: dict[str, Tensor], cfg: A.AdapterConfig, preset: str) -> None:
    arrays = {k: v.data for k, v in params.items()}
    arrays["meta.preset"] = np.float64(list(A.PRESETS).index(preset))
    arrays["meta.l"] = np.float64(cfg.l)
    checkpoint.save(path, arrays)


def load_adapters(path: Path) -> tuple[dict[str, Tensor], str, int]:
    arrays = checkpoint.load(path)
    preset = list(A.PRESETS)[int(arrays.pop("meta.preset"))]
    l = int(arrays.pop("meta.l"))
    return {k: Tensor(v) for k, v in arrays.items()}, preset, l


def _metrics_csv(config_name: str, records) -> str:
    rows = [
        TR.AblationRow(config_name, r.split, 0, r.step, r.miou, r.loss, r.per_class_iou, r.seconds)
        for r in records
    ]
    return TR.results_csv(rows)


def _per_class_json(config_name: str, records) -> str:
    rows = [
        TR.AblationRow(config_name, r.split, 0, r.step, r.miou, r.loss, r.per_class_iou, r.seconds)
        for r in records
    ]
    return TR.summary_json(rows)


def _load_model(cfg: config.RunConfig) -> SegmentationModel:
    path = Path(cfg.ckpt_dir) / BACKBONE_FILE
    if not path.exists():
        raise CommandError(f"no backbone checkpoint at {path}; run pretrain first")
    return load_backbone(path)


def _load_data(cfg: config.RunConfig) -> D.Datasets:
    if not (Path(cfg.data_dir) / "manifest.txt").exists():
        raise CommandError(f"no dataset at {cfg.data_dir}; run gen-data first")
    return D.load_datasets(cfg.data_dir)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: config.RunConfig, force: bool = False) -> Path:
    out = _prepare_dir(Path(cfg.data_dir), force)
    ds = D.build_datasets(cfg.data_config())
    D.save_datasets(ds, out)
    _echo_config(cfg, out)
    return out


def cmd_pretrain(cfg: config.RunConfig, force: bool = False) -> Path:
    ds = _load_data(cfg)
    path = _guard_file(Path(cfg.ckpt_dir) / BACKBONE_FILE, force)
    results = _prepare_dir(Path(cfg.results_dir) / "pretrain", force)
    trace: list = []
    model = pretrain(init_model(cfg.backbone_config(), cfg.seed), ds.pretrain, cfg.pretrain_steps,
                     lr=cfg.pretrain_lr, seed=cfg.seed, batch_size=cfg.batch_size, trace=trace)
    save_backbone(path, model)
    lines = ["step,loss"] + [f"{s},{v!r}" for s, v in trace]
    (results / "loss.csv").write_text("\n".join(lines) + "\n")
    _echo_config(cfg, results)
    return path


def cmd_train(cfg: config.RunConfig, force: bool = False) -> Path:
    model = _load_model(cfg)
    ds = _load_data(cfg)
    acfg = cfg.adapter_config()
    tag = f"{cfg.preset}-seed{cfg.seed}"
    path = _guard_file(Path(cfg.ckpt_dir) / f"adapters-{tag}.ckpt", force)
    results = _prepare_dir(Path(cfg.results_dir) / f"train-{tag}", force)
    adapters = A.init_adapters(model.config.layers, acfg.l, model.config.d, cfg.seed)
    try:
        trained = TR.train_adapters(model, adapters, ds.source, acfg, cfg.train_config())
    except TrainingDiverged as err:
        if err.last_good is not None:
            save_adapters(path.with_suffix(".last-good.ckpt"), err.last_good, acfg, cfg.preset)
        raise
    save_adapters(path, trained.adapters, acfg, cfg.preset)
    (results / "metrics.csv").write_text(_metrics_csv(cfg.preset, trained.trace))
    (results / "summary.json").write_text(_per_class_json(cfg.preset, trained.trace))
    (results / "loss.csv").write_text("step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(trained.losses)))
    _echo_config(cfg, results)
    return path


def cmd_eval(cfg: config.RunConfig, force: bool = False) -> Path:
    model = _load_model(cfg)
    ds = _load_data(cfg)
    if cfg.adapters:
        adapters, name, l = load_adapters(Path(cfg.adapters))
        acfg = A.preset(name, l=l, d=model.config.d, eps_sigma=cfg.eps_sigma, ao_scope=cfg.ao_scope)
    else:
        adapters, name, acfg = None, "frozen", None
    results = _prepare_dir(Path(cfg.results_dir) / f"eval-{name}", force)
    splits = {"source": ds.source, **{f"target{i + 1}": t for i, t in enumerate(ds.targets)}}
    records = [TR.evaluate(model, samples, acfg, adapters, split) for split, samples in splits.items()]
    (results / "metrics.csv").write_text(_metrics_csv(name, records))
    (results / "summary.json").write_text(_per_class_json(name, records))
    _echo_config(cfg, results)
    return results


def cmd_ablate(cfg: config.RunConfig, force: bool = False) -> Path:
    model = _load_model(cfg)
    ds = _load_data(cfg)
    results = _prepare_dir(Path(cfg.results_dir) / "ablate", force)
    configs = {name: cfg.adapter_config(name) for name in cfg.config_names()}
    rows = TR.run_ablation(model, ds, configs, cfg.seeds(), cfg.train_config())
    (results / "results.csv").write_text(TR.results_csv(rows))
    (results / "summary.json").write_text(TR.summary_json(rows))
    _echo_config(cfg, results)
    return results


def cmd_gradcheck(cfg: config.RunConfig, force: bool = False, suite=None) -> bool:
    results = checks.run_checks(checks.default_checks(cfg.seed) if suite is None else suite)
    text = checks.report(results)
    out = _prepare_dir(Path(cfg.results_dir) / "gradcheck", force)
    (out / "report.txt").write_text(text)
    _echo_config(cfg, out)
    sys.stdout.write(text)
    return all(r.passed for r in results)


def write_grid(path: Path, grid: np.ndarray) -> None:
    """``[d, H, W]`` array as text: a ``d H W`` header then one row per line."""
    d, H, W = grid.shape
    lines = [f"{d} {H} {W}"]
    for row in grid.reshape(d * H, W):
        lines.append(" ".join(f"{v:.17g}" for v in row))
    path.write_text("\n".join(lines) + "\n")


def read_grid(path: Path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    d, H, W = (int(v) for v in lines[0].split())
    values = np.array([[float(v) for v in line.split()] for line in lines[1:]])
    return values.reshape(d, H, W)


def read_image(path: Path) -> np.ndarray:
    """A ``[C, H, W]`` image from a container with an ``image`` entry or a grid text file."""
    path = Path(path)
    if path.read_bytes()[: len(checkpoint.MAGIC)] == checkpoint.MAGIC.encode():
        return checkpoint.load(path)["image"]
    return read_grid(path)


def read_dump(directory: Path) -> spectral.SpectralPair:
    """Stack the per-channel amplitude/phase files of a dump back into ``[C, H, W]``."""
    directory = Path(directory)
    amp = sorted(directory.glob("amplitude_c*.txt"), key=lambda p: int(p.stem.split("_c")[1]))
    phase = sorted(directory.glob("phase_c*.txt"), key=lambda p: int(p.stem.split("_c")[1]))
    a = np.concatenate([read_grid(p) for p in amp])
    ph = np.concatenate([read_grid(p) for p in phase])
    return spectral.SpectralPair(Tensor(a), Tensor(ph))


def cmd_spectral_dump(cfg: config.RunConfig, force: bool = False) -> Path:
    if not cfg.image:
        raise CommandError("spectral-dump needs an input: --set image=PATH")
    src = Path(cfg.image)
    out = _prepare_dir(Path(cfg.results_dir) / "spectral-dump", force)
    if src.is_dir():
        # a previous dump: recompose it into an image
        image = spectral.compose(read_dump(src), strict=False).data
        write_grid(out / "recomposed.txt", image)
    else:
        image = read_image(src)
        if image.ndim == 2:
            image = image[None]
        pair = spectral.decompose(image)
        for c in range(image.shape[0]):
            write_grid(out / f"amplitude_c{c}.txt", pair.amplitude.data[c : c + 1])
            write_grid(out / f"phase_c{c}.txt", pair.phase.data[c : c + 1])
    _echo_config(cfg, out)
    return out


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-adapter": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "spectral-dump": cmd_spectral_dump,
}


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spectral-tokens", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help=f"key = value config file (default: ${config.CONFIG_ENV})")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--force", action="store_true", help="replace existing outputs")
    p.add_argument("--data-dir")
    p.add_argument("--ckpt-dir")
    p.add_argument("--results-dir")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args: argparse.Namespace) -> config.RunConfig:
    overrides = {"command": args.command}
    for item in args.set:
        if "=" not in item:
            raise A.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("seed", "data_dir", "ckpt_dir", "results_dir"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = str(value)
    return config.load(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        result = HANDLERS[args.command](cfg, force=args.force)
    except (CommandError, A.ConfigError, checkpoint.FormatError, TrainingDiverged, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    if result is False:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
