"""Command-line surface: synth, vocab, featurize, train, caption, eval,
ablate, augment.

Every command is a pure function of its flags, config file, input files,
and seed; reports and tables are byte-reproducible across reruns (training
logs carry a wall_time field, which is the one excusable exception). Exit
codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from convcap import figures
from convcap.errors import ConfigError, ConvCapError, DataError, FormatError, NumericError
from convcap.image import (AugmentPolicy, ImageRaster, POLICIES, apply_policy,
                           encode_images, load_features, load_ppm, save_features,
                           save_ppm)
from convcap.inference import decode_corpus, write_candidates_jsonl
from convcap.metrics import (build_instances, evaluate_corpus, format_csv,
                             format_table, load_candidates_jsonl, score_all)
from convcap.models import ModelConfig, load_checkpoint
from convcap.synth import SynthSpec, generate
from convcap.text import (CaptionDataset, Vocabulary, build_vocab,
                          load_captions_jsonl, save_captions_jsonl)
from convcap.training import TrainConfig, train

LAYER_GRID = (1, 2, 3, 4)
MAX_LEN_GRID = (10, 15, 20, 25, 30, 35, 40)
AUGMENT_GRID = POLICIES  # none + the five transform policies


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _worker_count() -> int:
    raw = os.environ.get("CONVCAP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"CONVCAP_THREADS must be an integer, got {raw!r}") from e
    if n < 1:
        raise ConfigError("CONVCAP_THREADS must be >= 1")
    return n


# ---------------------------------------------------------------------------
# Run configuration

_DATA_KEYS = {"captions", "images", "features", "vocab", "min_count",
              "feature_grid", "feature_seed"}
_INFER_KEYS = {"beam_width", "max_len", "n_best", "length_normalize", "suppress_unk"}


def _section(obj, name, allowed):
    section = obj.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    return section


def load_run_config(path, seed_override=None):
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(obj) - {"model", "train", "data", "inference"}
    if unknown:
        raise ConfigError(f"{path}: unknown config sections: {sorted(unknown)}")

    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    try:
        model_cfg = ModelConfig(**_section(obj, "model", model_keys))
        train_cfg = TrainConfig(**_section(obj, "train", train_keys))
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e
    data = dict(_section(obj, "data", _DATA_KEYS))
    inference = dict(_section(obj, "inference", _INFER_KEYS))
    inference.setdefault("beam_width", 3)
    inference.setdefault("n_best", 1)
    if seed_override is not None:
        model_cfg.seed = seed_override
        train_cfg.seed = seed_override
    return model_cfg, train_cfg, data, inference


def resolved_config_dict(model_cfg, train_cfg, data, inference):
    return {"model": asdict(model_cfg), "train": asdict(train_cfg),
            "data": data, "inference": inference}


# ---------------------------------------------------------------------------
# Commands

def cmd_synth(args):
    out = Path(args.out)
    spec = SynthSpec(count=args.count, size=args.size,
                     captions_per_image=args.captions_per_image,
                     seed=args.seed if args.seed is not None else 0)
    corpus = generate(spec)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for image_id, img in corpus.images.items():
        save_ppm(out / "images" / f"{image_id}.ppm", img)
    save_captions_jsonl(out / "captions.jsonl", corpus.entries)
    _write_json(out / "config.json", asdict(spec))
    print(f"wrote {len(corpus.images)} images and "
          f"{sum(len(c) for _, _, c in corpus.entries)} captions to {out}")
    return 0


def cmd_vocab(args):
    dataset = load_captions_jsonl(args.captions)
    vocab = build_vocab(dataset, min_count=args.min_count)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(vocab.to_json() + "\n", encoding="utf-8")
    _write_json(str(out) + ".config.json",
                {"captions": str(args.captions), "min_count": args.min_count})
    print(f"vocabulary of {len(vocab)} tokens written to {out}")
    return 0


def _load_images_dir(path) -> dict[str, ImageRaster]:
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"image directory {path} does not exist")
    images = {}
    for ppm in sorted(root.glob("*.ppm")):
        images[ppm.stem] = load_ppm(ppm)
    if not images:
        raise DataError(f"no .ppm images under {path}")
    return images


def cmd_featurize(args):
    images = _load_images_dir(args.images)
    seed = args.seed if args.seed is not None else 0
    fs = encode_images(images, grid=args.grid, dim=args.dim, seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_features(out, fs)
    _write_json(str(out) + ".config.json",
                {"images": str(args.images), "grid": args.grid, "dim": args.dim,
                 "seed": seed})
    print(f"encoded {len(images)} images ({fs.num_regions} regions x {fs.dim}) to {out}")
    return 0


def _prepare_training_inputs(model_cfg, data, seed_override=None):
    if "captions" not in data:
        raise ConfigError("config data section needs a 'captions' path")
    dataset = load_captions_jsonl(data["captions"])
    if "vocab" in data:
        vocab = Vocabulary.from_json(Path(data["vocab"]).read_text(encoding="utf-8"))
    else:
        vocab = build_vocab(dataset, min_count=data.get("min_count", 5))
    if model_cfg.vocab_size == 0:
        model_cfg.vocab_size = len(vocab)
    elif model_cfg.vocab_size != len(vocab):
        raise ConfigError(f"model vocab_size {model_cfg.vocab_size} != "
                          f"vocabulary size {len(vocab)}")
    images = _load_images_dir(data["images"]) if "images" in data else None
    features = load_features(data["features"]) if "features" in data else None
    return dataset, vocab, images, features


def cmd_train(args):
    if not args.config:
        raise ConfigError("train requires --config")
    model_cfg, train_cfg, data, inference = load_run_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, vocab, images, features = _prepare_training_inputs(model_cfg, data)
    result = train(model_cfg, train_cfg, dataset, vocab, out,
                   features=features, images=images,
                   feature_grid=data.get("feature_grid", 4),
                   feature_seed=data.get("feature_seed", 0),
                   log_fn=lambda msg: print(msg))
    resolved = resolved_config_dict(model_cfg, train_cfg, data, inference)
    resolved["resolved"] = {"batch_size": train_cfg.resolved_batch_size(model_cfg),
                            "vocab_size": model_cfg.vocab_size}
    _write_json(out / "config.json", resolved)
    if result.history:
        figures.loss_curve(result.history, out / "loss_curve.png")
    print(f"trained {len(result.history)} epochs; final checkpoint {result.final_path}")
    return 0


def cmd_caption(args):
    model = load_checkpoint(args.checkpoint)
    features = load_features(args.features)
    vocab = Vocabulary.from_json(Path(args.vocab).read_text(encoding="utf-8"))
    if len(vocab) != model.cfg.vocab_size:
        raise ConfigError(f"vocabulary size {len(vocab)} != checkpoint vocab_size "
                          f"{model.cfg.vocab_size}")
    if args.captions:
        dataset = load_captions_jsonl(args.captions)
        ids = dataset.ids(args.split)
        if not ids:
            raise DataError(f"split {args.split!r} has no images")
    else:
        ids = features.ids()
    missing = [i for i in ids if i not in features]
    if missing:
        raise DataError(f"features missing for {missing[:3]}")
    records = decode_corpus(model, features, ids, beam_width=args.beam,
                            max_len=args.max_len, n_best=args.nbest,
                            length_normalize=args.length_normalize,
                            suppress_unk=args.suppress_unk)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_candidates_jsonl(out, records, vocab=vocab)
    _write_json(str(out) + ".config.json",
                {"checkpoint": str(args.checkpoint), "beam_width": args.beam,
                 "max_len": args.max_len, "n_best": args.nbest,
                 "split": args.split, "length_normalize": args.length_normalize,
                 "suppress_unk": args.suppress_unk})
    print(f"wrote captions for {len(ids)} images to {out}")
    return 0


def cmd_eval(args):
    dataset = load_captions_jsonl(args.captions)
    report = evaluate_corpus(args.candidates, dataset, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    label = args.label or "eval"
    table = format_table([(label, report)])
    (out / "report.txt").write_text(table, encoding="utf-8")
    (out / "report.csv").write_text(format_csv([(label, report)]), encoding="utf-8")
    _write_json(out / "report.json", report.as_dict())
    figures.metric_bars(report, out / "metrics.png", title=label)
    _write_json(out / "config.json",
                {"candidates": str(args.candidates), "captions": str(args.captions),
                 "split": args.split, "label": label})
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# Ablation harness

def _cell_seed(base_seed: int, grid: str, value) -> int:
    from convcap.text import stable_id_hash
    return (base_seed + stable_id_hash(f"{grid}:{value}")) % (2 ** 31)


def _run_cell(grid, value, model_cfg, train_cfg, dataset, vocab, images, features,
              data, inference, cell_dir):
    import copy
    mcfg = copy.deepcopy(model_cfg)
    tcfg = copy.deepcopy(train_cfg)
    if grid == "layers":
        mcfg.num_layers = value
    elif grid == "max_len":
        mcfg.max_len = value
    elif grid == "augment":
        tcfg.augment = value
    seed = _cell_seed(tcfg.seed, grid, value)
    mcfg.seed = seed
    tcfg.seed = seed

    cell_dir.mkdir(parents=True, exist_ok=True)
    result = train(mcfg, tcfg, dataset, vocab, cell_dir,
                   features=features, images=images,
                   feature_grid=data.get("feature_grid", 4),
                   feature_seed=data.get("feature_seed", 0))

    eval_split = "test" if dataset.split("test") else "dev"
    ids = dataset.ids(eval_split)
    feats = features
    if feats is None:
        feats = encode_images(images, grid=data.get("feature_grid", 4),
                              dim=mcfg.feature_dim, seed=data.get("feature_seed", 0))
    records = list(decode_corpus(result.model, feats, ids,
                                 beam_width=inference.get("beam_width", 3),
                                 max_len=inference.get("max_len"),
                                 n_best=1))
    cands = cell_dir / "candidates.jsonl"
    write_candidates_jsonl(cands, records, vocab=vocab)
    report = evaluate_corpus(cands, dataset, eval_split)
    _write_json(cell_dir / "report.json", report.as_dict())
    return report


def cmd_ablate(args):
    if not args.config:
        raise ConfigError("ablate requires --config")
    model_cfg, train_cfg, data, inference = load_run_config(args.config, args.seed)
    grids = {"layers": LAYER_GRID, "max_len": MAX_LEN_GRID, "augment": AUGMENT_GRID}
    if args.grid not in grids:
        raise ConfigError(f"unknown grid {args.grid!r}; choose from {sorted(grids)}")
    values = grids[args.grid]
    if args.grid == "augment" and "images" not in data:
        raise ConfigError("the augment grid needs raw images in the data section")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, vocab, images, features = _prepare_training_inputs(model_cfg, data)

    def cell(value):
        cell_dir = out / "cells" / f"{args.grid}_{value}"
        try:
            return value, _run_cell(args.grid, value, model_cfg, train_cfg, dataset,
                                    vocab, images, features, data, inference, cell_dir)
        except (ConvCapError, ValueError) as e:
            return value, e

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(cell, values))
    else:
        results = [cell(v) for v in values]

    rows = []
    chart_cells = []
    failures = 0
    for value, res in results:
        if isinstance(res, Exception):
            failures += 1
            rows.append((str(value), None))
            chart_cells.append((value, None))
            cell_dir = out / "cells" / f"{args.grid}_{value}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            (cell_dir / "error.txt").write_text(
                f"{type(res).__name__}: {res}\n", encoding="utf-8")
        else:
            rows.append((str(value), res))
            chart_cells.append((value, res))

    table_rows = [(label, rep) for label, rep in rows if rep is not None]
    failed_note = "".join(f"{label}: failed (see cells/{args.grid}_{label}/error.txt)\n"
                          for label, rep in rows if rep is None)
    table = format_table(table_rows, label=args.grid) + failed_note
    (out / f"ablate_{args.grid}.txt").write_text(table, encoding="utf-8")
    (out / f"ablate_{args.grid}.csv").write_text(
        format_csv(table_rows, label=args.grid), encoding="utf-8")
    figures.ablation_chart(args.grid, chart_cells, out / f"ablate_{args.grid}.png")
    _write_json(out / "config.json",
                resolved_config_dict(model_cfg, train_cfg, data, inference)
                | {"grid": args.grid, "values": list(values)})
    print(table, end="")
    return 0 if failures == 0 else 3


# ---------------------------------------------------------------------------
# Augmentation preview

def cmd_augment(args):
    img = load_ppm(args.image)
    policy = AugmentPolicy(args.policy, distortion_scale=args.distortion)
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    tiles = [apply_policy(img, policy, rng) for _ in range(args.samples)]

    cols = math.ceil(math.sqrt(len(tiles)))
    rows = math.ceil(len(tiles) / cols)
    tile_h = max(t.height for t in tiles)
    tile_w = max(t.width for t in tiles)
    gap = 2
    sheet = np.zeros((rows * tile_h + (rows - 1) * gap,
                      cols * tile_w + (cols - 1) * gap, 3), dtype=np.uint8)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        y = r * (tile_h + gap)
        x = c * (tile_w + gap)
        sheet[y:y + tile.height, x:x + tile.width] = tile.pixels
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_ppm(out, ImageRaster(sheet))
    _write_json(str(out) + ".config.json",
                {"image": str(args.image), "policy": args.policy,
                 "samples": args.samples, "seed": seed,
                 "distortion": args.distortion})
    print(f"wrote {len(tiles)}-tile contact sheet to {out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("--out", required=True, help="output file or directory")

    parser = argparse.ArgumentParser(prog="convcap",
                                     description="caption decoder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--captions-per-image", type=int, default=5)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("vocab", parents=[common], help="build the vocabulary")
    p.add_argument("--captions", required=True)
    p.add_argument("--min-count", type=int, default=5)
    p.set_defaults(fn=cmd_vocab)

    p = sub.add_parser("featurize", parents=[common], help="encode images to features")
    p.add_argument("--images", required=True)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--dim", type=int, default=64)
    p.set_defaults(fn=cmd_featurize)

    p = sub.add_parser("train", parents=[common], help="train a decoder")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("caption", parents=[common], help="beam-search captions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--captions", help="captions JSONL (restricts ids to a split)")
    p.add_argument("--split", default="test")
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--length-normalize", action="store_true")
    p.add_argument("--suppress-unk", action="store_true")
    p.set_defaults(fn=cmd_caption)

    p = sub.add_parser("eval", parents=[common], help="score candidate captions")
    p.add_argument("--candidates", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--label", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("--grid", required=True, choices=["layers", "max_len", "augment"])
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("augment", parents=[common], help="augmentation contact sheet")
    p.add_argument("--image", required=True)
    p.add_argument("--policy", required=True, choices=list(POLICIES))
    p.add_argument("--samples", type=int, default=9)
    p.add_argument("--distortion", type=float, default=0.5)
    p.set_defaults(fn=cmd_augment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, FormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
