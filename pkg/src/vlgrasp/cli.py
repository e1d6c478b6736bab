"""Command-line entry point: ``vlgrasp {train,eval,predict,gen-data,audit}``.

Exit codes: 0 success, 2 configuration error, 3 runtime or divergence error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, VLGraspError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def read_config(path) -> dict:
    """YAML or JSON mapping (JSON is valid YAML)."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _scene_spec(d):
    from .datasynth import SceneSpec

    try:
        return SceneSpec.from_dict(d or {})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scene spec: {exc}") from exc


def _load_samples(raw: dict, base: Path, split, data_override=None):
    """Samples from ``data`` (a dataset directory) or ``synthetic`` (generated on the fly)."""
    from .datasynth import generate_dataset, load_dataset

    if data_override:
        return load_dataset(data_override, split), str(data_override)
    if "data" in raw:
        path = Path(raw["data"])
        path = path if path.is_absolute() else base / path
        return load_dataset(path, split), str(path)
    if "synthetic" in raw:
        syn = dict(raw["synthetic"])
        count = int(syn.pop("count", 16))
        seed = syn.pop("seed", None)
        samples = generate_dataset(_scene_spec(syn.pop("spec", {})), count, seed, split_fractions=(1.0, 0.0, 0.0))
        if syn:
            raise ConfigError(f"unknown synthetic keys: {sorted(syn)}")
        return samples, None
    raise ConfigError("config needs either 'data' (dataset directory) or 'synthetic'")


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    raw = read_config(args.config)
    train_raw = {k: v for k, v in raw.items() if k not in ("data", "synthetic", "split")}
    train_raw["task"] = args.task
    if args.seed is not None:
        train_raw["seed"] = args.seed
    config = TrainConfig.from_dict(train_raw)
    samples, data_path = _load_samples(raw, Path(args.config).parent, raw.get("split", "train"), args.data)
    if not samples:
        raise ConfigError("the selected training split is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(config, samples, out_dir=None,
                   on_step=lambda s, v: logging.getLogger("vlgrasp.train").info("step %d loss %.6f", s, v))
    ckpt = result.checkpoint
    ckpt.extra = {"config_file": raw, "data": data_path}
    path = ckpt.save(out / "checkpoint.npz")
    (out / "losses.json").write_text(json.dumps(result.history), encoding="utf-8")
    print(f"trained {ckpt.step} steps in {result.seconds:.1f}s; final loss {result.history[-1]:.6f}")
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .datasynth import load_dataset
    from .trainer import Checkpoint, evaluate

    ckpt = Checkpoint.load(args.checkpoint)
    data = args.data or ckpt.extra.get("data")
    if not data:
        raise ConfigError("no dataset: pass --data (the checkpoint was trained on generated data)")
    samples = load_dataset(data, args.split)
    if not samples:
        raise ConfigError(f"split {args.split!r} of {data} is empty")
    report = evaluate(ckpt, samples)
    print(report.table())
    if args.json:
        Path(args.json).write_text(report.to_json(), encoding="utf-8")
    return EXIT_OK


def read_image(path) -> np.ndarray:
    from PIL import Image

    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path).astype(np.float32)
        return img / 255.0 if img.max() > 1.0 else img
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_depth(path) -> np.ndarray:
    """``.npy`` in meters, or a 16-bit PNG in millimeters."""
    from PIL import Image

    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float32) / 1000.0


def _fit(image, size):
    from PIL import Image

    if image.shape[:2] == tuple(size):
        return image
    im = Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8))
    return np.asarray(im.resize((size[1], size[0]), Image.BILINEAR), dtype=np.float32) / 255.0


def _fit_depth(depth, size):
    from PIL import Image

    if depth.shape == tuple(size):
        return depth
    return np.asarray(Image.fromarray(depth.astype(np.float32), mode="F").resize((size[1], size[0]), Image.BILINEAR))


def cmd_predict(args) -> int:
    from .grasp import write_predictions
    from .trainer import Checkpoint, predict

    ckpt = Checkpoint.load(args.checkpoint)
    size = ckpt.config.model.backbone.image_size
    image = _fit(read_image(args.image), size)
    depth = _fit_depth(read_depth(args.depth), size) if args.depth else None
    record, files = predict(ckpt, image, args.text, depth, out_dir=args.out, sample_id=Path(args.image).stem)
    write_predictions(Path(args.out) / "predictions.jsonl", [record])
    print(record.to_json())
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .datasynth import generate_dataset, save_dataset

    raw = read_config(args.spec) if args.spec else {}
    splits = tuple(raw.pop("split_fractions", (0.8, 0.1, 0.1)))
    spec = _scene_spec(raw)
    if args.count <= 0:
        raise ConfigError("--count must be positive")
    samples = generate_dataset(spec, args.count, args.seed, split_fractions=splits)
    root = save_dataset(samples, args.out, spec)
    counts = {}
    for s in samples:
        counts[s.split] = counts.get(s.split, 0) + 1
    print(f"wrote {len(samples)} samples to {root} ({', '.join(f'{k}: {v}' for k, v in sorted(counts.items()))})")
    return EXIT_OK


def cmd_audit(args) -> int:
    from .backbone import build_toy_backbone
    from .metrics import param_report
    from .trainer import Checkpoint

    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.build_model()
    report = param_report(model.parameter_registry())
    print(report)
    reference = build_toy_backbone(ckpt.config.model.backbone).state_dict()
    changed = [k for k, v in reference.items()
               if not np.array_equal(ckpt.state[f"backbone.{k}"], v.numpy())]
    if changed:
        print(f"frozen backbone differs from its seeded build in {len(changed)} tensors: {changed[:5]}")
        return EXIT_RUNTIME
    print("frozen backbone: bitwise identical to its seeded build")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlgrasp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log every training step")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a task model")
    t.add_argument("--task", choices=("res", "rgs", "rga"), required=True)
    t.add_argument("--config", required=True, help="YAML/JSON training config")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--data", default=None, help="dataset directory (overrides the config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--data", default=None)
    e.add_argument("--json", default=None, help="also write the report as JSON")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="run one image + expression")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--text", required=True)
    r.add_argument("--depth", default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", default=None, help="YAML/JSON scene spec")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("audit", help="parameter counts and frozen-backbone check")
    a.add_argument("--checkpoint", required=True)
    a.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VLGraspError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
