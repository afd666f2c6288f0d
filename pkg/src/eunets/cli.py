"""Command-line front end: ``train``, ``explain``, ``uncert`` and ``bench-cam``.

Settings come from a flat ``key = value`` file (``--config``) with flag
overrides on top. Every command writes the fully resolved settings to
``config.txt`` in its output directory; feeding that file back reproduces
the run.
"""

import argparse
import dataclasses
import logging
import os
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .data_io import (
    SyntheticConfig,
    ensure_dir,
    generate_synthetic,
    kfold,
    load_checkpoint,
    read_pgm,
    save_checkpoint,
    stack_samples,
    write_csv,
    write_map_csv,
    write_pgm,
)
from .exceptions import ContractViolation, DivergenceError, FormatError
from .explain import cam_benchmark, composite_cam, grad_cam, stage_cams
from .harness import TrainConfig, dice_score, predict_masks, train
from .models import ModelConfig, build_model
from .uncertainty import (
    CSV_FIELDS,
    UncertaintyConfig,
    agreement_metrics,
    collaboration_map,
    ensemble_stats,
    format_table,
    summarize_rows,
)

logger = logging.getLogger("eunets")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CLASS, EXIT_STRUCTURE = 0, 2, 3, 4, 5


class ConfigError(Exception):
    """Bad settings or inputs; maps to exit code 2."""


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# flat key -> (section, field). Sections share nothing except through these names.
_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": SyntheticConfig,
    "uncert": UncertaintyConfig,
}
_RENAMED = {("train", "seed"): None, ("data", "seed"): "data_seed", ("uncert", "anchor_rule"): None}

RUN_DEFAULTS = {
    "checkpoint": "",
    "ensemble": "",
    "image": "",
    "sample_id": 0,
    "fold": 0,
    "class": 1,
    "stage": "all",
    "method": "both",
    "samples": 50,
    "n_perm": 1000,
    "sizes": "32,64,128",
}


def _field_table():
    table = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            key = _RENAMED.get((section, f.name), f.name)
            if key is None:
                continue
            table[key] = (section, f.name, f.default)
    return table


FIELDS = _field_table()
KNOWN_KEYS = tuple(sorted(set(FIELDS) | set(RUN_DEFAULTS)))


def _default(key):
    if key in FIELDS:
        return FIELDS[key][2]
    return RUN_DEFAULTS[key]


def _coerce(key, text):
    proto = _default(key)
    text = text.strip()
    try:
        if isinstance(proto, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(proto, int):
            return int(text)
        if isinstance(proto, float):
            return float(text)
        if isinstance(proto, tuple):
            return tuple(t.strip() for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from None
    return text


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are an error."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


@dataclasses.dataclass
class RunConfig:
    """Resolved settings for one command."""

    values: dict

    @classmethod
    def resolve(cls, file_values=None, overrides=None):
        values = {k: _default(k) for k in KNOWN_KEYS}
        values.update(file_values or {})
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(values)

    def section(self, name):
        cls = _SECTIONS[name]
        kwargs = {fname: self.values[key] for key, (sec, fname, _) in FIELDS.items() if sec == name}
        if name == "train":
            kwargs["seed"] = self.values["seed"]
        try:
            return cls(**kwargs)
        except ContractViolation as exc:
            raise ConfigError(f"invalid {name} settings: {exc}") from exc

    @property
    def model(self):
        return self.section("model")

    @property
    def train(self):
        return self.section("train")

    @property
    def data(self):
        return self.section("data")

    @property
    def uncert(self):
        return self.section("uncert")

    def __getitem__(self, key):
        return self.values[key]

    def to_text(self):
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in KNOWN_KEYS)

    def write(self, out_dir):
        Path(out_dir, "config.txt").write_text(self.to_text())


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load(path):
    if not path:
        raise ConfigError("a checkpoint path is required (--checkpoint)")
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except FormatError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc


def _splits(cfg):
    data = generate_synthetic(cfg.data)
    plan = kfold([s.id for s in data], 5, cfg["data_seed"])
    test_fold = cfg["fold"]
    if not 0 <= test_fold < 5:
        raise ConfigError("fold must be in [0, 5)")
    val_fold = (test_fold + 1) % 5
    by_id = {s.id: s for s in data}
    test = [by_id[i] for i in sorted(plan.fold(test_fold))]
    val = [by_id[i] for i in sorted(plan.fold(val_fold))]
    rest = [by_id[i] for i in sorted(by_id) if plan.assignments[i] not in (test_fold, val_fold)]
    return rest, val, test


def _input_image(cfg, model):
    """The PGM given by ``image`` or the synthetic sample ``sample_id``; shape ``[1, C, H, W]``."""
    if cfg["image"]:
        try:
            values = read_pgm(cfg["image"]).values
        except FileNotFoundError:
            raise ConfigError(f"image not found: {cfg['image']}") from None
        except FormatError as exc:
            raise ConfigError(f"cannot read image {cfg['image']}: {exc}") from exc
        image = values[None, None]
    else:
        data = generate_synthetic(dataclasses.replace(cfg.data, sample_count=cfg["sample_id"] + 1))
        image = data[cfg["sample_id"]].image[None]
    step = 2**model.depth
    if image.shape[1] != model.config.in_channels:
        raise ConfigError(f"model expects {model.config.in_channels} input channels")
    if image.shape[2] % step or image.shape[3] % step:
        raise ConfigError(f"image sides must be divisible by {step}, got {image.shape[2:]}")
    return image


def _export(pixel_map, out_dir, stem):
    write_pgm(pixel_map.normalized(), Path(out_dir, f"{stem}.pgm"))
    write_map_csv(pixel_map, Path(out_dir, f"{stem}.csv"))


def _stages(choice, depth):
    if choice == "all":
        return list(range(1, depth + 1))
    try:
        stage = int(choice)
    except ValueError:
        raise ConfigError(f"stage must be an integer or 'all', got {choice!r}") from None
    if not 1 <= stage <= depth:
        raise ConfigError(f"stage must be in [1, {depth}]")
    return [stage]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg, out):
    train_set, val_set, test_set = _splits(cfg)
    model = build_model(cfg.model)
    try:
        model, history = train(model, train_set, val_set, cfg.train)
    except DivergenceError as exc:
        raise CommandError(str(exc), EXIT_DIVERGED) from exc
    save_checkpoint(model, Path(out, "model.eunc"))
    history.to_csv(Path(out, "history.csv"))
    x, y = stack_samples(test_set)
    pred = predict_masks(model, x)
    k = cfg.model.class_count
    rows = [(s.id, np.mean([dice_score(p, t, c) for c in range(1, k)])) for s, p, t in zip(test_set, pred, y)]
    write_csv(Path(out, "test_dice.csv"), ("sample_id", "dice"), rows)
    logger.info("best epoch %d, test dice %.4f", history.best_epoch, np.mean([r[1] for r in rows]))


def cmd_explain(cfg, out):
    model = _load(cfg["checkpoint"])
    c = cfg["class"]
    if not 0 <= c < model.config.class_count:
        raise CommandError(f"class {c} out of range [0, {model.config.class_count})", EXIT_CLASS)
    if not model.with_mhex:
        raise CommandError("explain needs a model with MHEX+ blocks", EXIT_STRUCTURE)
    image = _input_image(cfg, model)
    stages = _stages(cfg["stage"], model.depth)
    cams = stage_cams(model, image, c)
    for l in stages:
        _export(cams[l - 1], out, f"mhex_cam_stage{l}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            gc = grad_cam(model, image, c, l)
        if gc.meta["degenerate"]:
            logger.warning("stage %d: no pixel predicted as class %d, Grad-CAM map is zero", l, c)
        _export(gc, out, f"gradcam_stage{l}")
    _export(composite_cam(cams, image.shape[-1]), out, "mhex_cam_composite")


def _dataset_images(cfg, model):
    if cfg["image"]:
        return [(0, _input_image(cfg, model))]
    data = generate_synthetic(cfg.data)
    n = cfg["samples"]
    if not 1 <= n <= len(data):
        raise ConfigError(f"samples must be in [1, {len(data)}]")
    chosen = np.sort(np.random.default_rng(cfg["seed"]).choice(len(data), size=n, replace=False))
    return [(data[i].id, data[i].image[None]) for i in chosen]


def cmd_uncert(cfg, out):
    method = cfg["method"]
    if method not in ("mhex", "ensemble", "both"):
        raise ConfigError(f"method must be mhex, ensemble or both, got {method!r}")
    eu = None
    if method in ("mhex", "both"):
        eu = _load(cfg["checkpoint"])
        if not eu.with_mhex or len(eu.decoder) < 2:
            raise CommandError("the collaboration map needs >= 2 MHEX+ decoder stages", EXIT_STRUCTURE)
    members = []
    if method in ("ensemble", "both"):
        paths = [p for p in cfg["ensemble"].split(",") if p.strip()]
        if len(paths) < 2:
            raise ConfigError("the ensemble method needs at least two checkpoints (--ensemble a,b,...)")
        members = [_load(p.strip()) for p in paths]
    reference = eu or members[0]
    rows = []
    for sample_id, image in _dataset_images(cfg, reference):
        mu = collaboration_map(eu, image, cfg.uncert) if eu is not None else None
        de = ensemble_stats(members, image) if members else None
        if mu is not None:
            _export(mu, out, f"mu_{sample_id}")
        if de is not None:
            _export(de.entropy, out, f"entropy_{sample_id}")
            _export(de.variance, out, f"variance_{sample_id}")
            _export(de.mean_prob[-1], out, f"mean_prob_{sample_id}")
        if mu is not None and de is not None:
            for name, ref in (("entropy", de.entropy), ("variance", de.variance)):
                rep = agreement_metrics(mu, ref, n_perm=cfg["n_perm"], seed=0)
                rows.append(
                    {"method": name, "sample_id": sample_id, "iou": rep.iou, "dice": rep.dice, "pearson_r": rep.pearson_r, "p_value": rep.p_value}
                )
    if rows:
        write_csv(Path(out, "agreement.csv"), CSV_FIELDS, rows)
        summary = summarize_rows(rows)
        Path(out, "summary.txt").write_text(format_table(summary) + "\n")
        logger.info("\n%s", format_table(summary))


def cmd_bench_cam(cfg, out):
    model = _load(cfg["checkpoint"]) if cfg["checkpoint"] else build_model(cfg.model)
    try:
        sizes = [int(s) for s in cfg["sizes"].split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"sizes must be a comma-separated list of integers, got {cfg['sizes']!r}") from None
    rows = cam_benchmark(model, sizes, c=min(cfg["class"], model.config.class_count - 1), seed=cfg["seed"])
    write_csv(Path(out, "bench_cam.csv"), ("size", "mhex_prep_s", "gradcam_s", "mhex_loops", "gradcam_loops"), rows)


COMMANDS = {"train": cmd_train, "explain": cmd_explain, "uncert": cmd_uncert, "bench-cam": cmd_bench_cam}


def build_parser():
    parser = argparse.ArgumentParser(prog="eunets", description="EU-Net segmentation, saliency and uncertainty tools.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        if name == "train":
            p.add_argument("--backbone", choices=("unet", "unetpp"))
            p.add_argument("--mhex", dest="with_mhex", action=argparse.BooleanOptionalAction, default=None)
            p.add_argument("--loss", dest="loss_kind", choices=("ce", "dice"))
            p.add_argument("--epochs", dest="max_epochs", type=int)
        if name in ("explain", "uncert", "bench-cam"):
            p.add_argument("--checkpoint")
            p.add_argument("--image")
        if name == "explain":
            p.add_argument("--stage")
            p.add_argument("--class", dest="class_", type=int)
        if name == "uncert":
            p.add_argument("--method", choices=("mhex", "ensemble", "both"))
            p.add_argument("--ensemble", help="comma-separated member checkpoints")
            p.add_argument("--samples", type=int)
        if name == "bench-cam":
            p.add_argument("--sizes")
    return parser


def _overrides(args):
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = _coerce(key, value)
    for key in ("seed", "backbone", "with_mhex", "loss_kind", "max_epochs", "checkpoint", "image", "stage", "method", "ensemble", "samples", "sizes"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    if getattr(args, "class_", None) is not None:
        out["class"] = args.class_
    return out


def _thread_limit():
    raw = os.environ.get("EUNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"EUNET_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("EUNET_THREADS must be >= 1")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def run(argv=None):
    """Parse ``argv`` and run one command; returns the exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        file_values = {}
        if args.config:
            try:
                text = Path(args.config).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from exc
            file_values = parse_config_text(text, args.config)
        cfg = RunConfig.resolve(file_values, _overrides(args))
        for section in _SECTIONS:
            cfg.section(section)
        out = ensure_dir(args.out)
        cfg.write(out)
        with _thread_limit():
            COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
