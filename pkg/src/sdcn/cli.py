"""``sdcn`` command line: generate | train | segment | eval.

Every command reads a JSON config (``--config PATH`` or a packaged
``--preset NAME``); flags override the config. Relative paths in a config
file resolve against the file's directory, and those in a preset against
the current working directory. Exit codes: 0 ok, 1 runtime error, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from importlib import resources
from pathlib import Path

import numpy as np

from sdcn import synthgen
from sdcn.autoencoder import ArchitectureSpec, load_model, save_model
from sdcn.clustering import Init, KRange
from sdcn.datacube import (
    DataCube,
    export_integrated_maps,
    export_result,
    flatten,
    integrated_maps,
    load_cube,
    load_masks,
    read_pgm,
    save_cube,
    segment,
    write_pgm,
)
from sdcn.deepcluster import TrainConfig, train
from sdcn.errors import ConfigError, SdcnError

log = logging.getLogger("sdcn")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


# -- config helpers ------------------------------------------------------------

class Config:
    """A validated JSON mapping plus the directory relative paths resolve against."""

    def __init__(self, data: dict, base: Path):
        self.data = data
        self.base = base

    def path(self, value, key: str, must_exist: bool = True) -> Path:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a path string")
        p = Path(value)
        if not p.is_absolute():
            p = self.base / p
        if must_exist and not p.exists():
            raise ConfigError(f"{key}: path does not exist: {p}")
        return p


def check_keys(section: dict, allowed, where: str, required=()):
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    missing = [k for k in required if k not in section]
    if missing:
        raise ConfigError(f"{where}: missing required key(s) {', '.join(missing)}")


def preset_names(command: str) -> list:
    root = resources.files("sdcn") / "presets" / command
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(args, command: str) -> Config:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.preset:
        res = resources.files("sdcn") / "presets" / command / f"{args.preset}.json"
        if not res.is_file():
            raise ConfigError(
                f"unknown {command} preset {args.preset!r}; available: {preset_names(command)}"
            )
        data = json.loads(res.read_text())
        base = Path.cwd()
    elif args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise ConfigError(f"config file not found: {cfg_path}")
        try:
            data = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cfg_path}: invalid JSON ({exc})") from exc
        base = cfg_path.resolve().parent
    else:
        raise ConfigError("--config or --preset is required")
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    if args.seed is not None:
        data["seed"] = args.seed
    return Config(data, base)


def output_dir(cfg: Config, args, section: dict) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = cfg.path(section.get("dir", "."), "output.dir", must_exist=False)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- generate --------------------------------------------------------------------

GEN_KEYS = {"seed", "mode", "seed_image", "image", "dictionary", "depth", "gen", "spectra", "output"}


def _builtin_dictionary(name: str, depth: int | None, seed: int):
    if name == "builtin:astro":
        return synthgen.astro_dictionary(synthgen.astro_grid(depth or 1024), seed=seed), "angstrom"
    if name == "builtin:xrf":
        return synthgen.xrf_dictionary(synthgen.xrf_grid(depth or 512)), "keV"
    raise ConfigError(f"dictionary: unknown builtin {name!r}")


def _seed_image(cfg: Config, d: dict, dictionary, seed: int):
    src = d.get("seed_image")
    if src is None:
        raise ConfigError("seed_image: required in cube mode")
    opts = d.get("image", {})
    check_keys(opts, {"width", "height", "n_sites", "jitter", "seed"}, "image")
    w, h = int(opts.get("width", 64)), int(opts.get("height", 64))
    if src == "builtin:tricolor":
        return synthgen.tricolor_image(w, h)
    if src == "builtin:blobs":
        return synthgen.blob_image(w, h, dictionary.colors, seed=int(opts.get("seed", seed)),
                                   n_sites=int(opts.get("n_sites", 12)),
                                   jitter=float(opts.get("jitter", 0.0)))
    return synthgen.load_rgb(cfg.path(src, "seed_image"))


def _gen_prepare(cfg: Config):
    d = cfg.data
    check_keys(d, GEN_KEYS, "generate config")
    seed = int(d.get("seed", 0))
    mode = d.get("mode", "cube")
    out_sec = d.get("output", {})
    check_keys(out_sec, {"dir", "name"}, "output")
    name = out_sec.get("name", "cube")
    if mode == "astro-spectra":
        sp = d.get("spectra", {})
        check_keys(sp, {"n", "noise_std", "background_fraction"}, "spectra")
        depth = int(d.get("depth", 1024))

        def run():
            spectra, labels, classes = synthgen.astro_spectra(
                int(sp.get("n", 20000)), synthgen.astro_grid(depth), seed=seed,
                noise_std=float(sp.get("noise_std", 0.1)),
                background_fraction=float(sp.get("background_fraction", 0.0)),
            )
            grid = synthgen.astro_grid(depth)
            cube = DataCube(spectra[None, :, :], "angstrom", grid.start, grid.step)
            return cube, labels[None, :], classes
        return run, out_sec, name
    if mode != "cube":
        raise ConfigError(f"mode: expected 'cube' or 'astro-spectra', got {mode!r}")
    src = d.get("dictionary")
    if src is None:
        raise ConfigError("dictionary: required in cube mode")
    if isinstance(src, str) and src.startswith("builtin:"):
        dictionary, unit = _builtin_dictionary(src, d.get("depth"), seed)
    else:
        try:
            dictionary = synthgen.load_dictionary(cfg.path(src, "dictionary"))
        except (KeyError, ValueError, OSError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"dictionary: cannot load ({exc})") from exc
        unit = "channel"
    gen = dict(d.get("gen", {}))
    check_keys(gen, {"rgb_threshold", "counts_scale", "noise", "noise_std", "background_level",
                     "rgb_krange", "rgb_silhouette_cap"}, "gen")
    try:
        gen_cfg = synthgen.GenConfig(seed=seed, **gen)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"gen: {exc}") from exc
    image = _seed_image(cfg, d, dictionary, seed)

    def run():
        lc = synthgen.generate_cube(image, dictionary, gen_cfg, channel_unit=unit)
        return lc.cube, lc.labels, lc.legend
    return run, out_sec, name


def cmd_generate(args) -> int:
    cfg = load_config(args, "generate")
    run, out_sec, name = _gen_prepare(cfg)
    out = output_dir(cfg, args, out_sec)
    cube, labels, legend = run()
    save_cube(cube, out / f"{name}.dcube")
    if len(legend) > 255:
        raise SdcnError("more than 255 labels cannot be stored in a P5 label map")
    write_pgm(out / f"{name}_labels.pgm", labels.astype(np.uint8))
    write_json(out / f"{name}_legend.json",
               {"legend": [{"index": i, "label": l} for i, l in enumerate(legend)]})
    log.info("wrote %s (%dx%dx%d)", out / f"{name}.dcube", cube.width, cube.height, cube.depth)
    return EXIT_OK


# -- train -------------------------------------------------------------------------

TRAIN_KEYS = {"seed", "data", "architecture", "training", "output"}
ARCH_KEYS = {"input_dim", "latent_dim", "sizing_rule", "n_hidden", "explicit_sizes",
             "decoder_sizes", "variant", "dropout_p"}
TRAINING_KEYS = {"epochs", "batch_size", "learning_rate", "silhouette_cap", "krange", "variant",
                 "gamma", "beta", "mmd", "validation_fraction", "input_scale", "init"}


def _train_prepare(cfg: Config):
    d = cfg.data
    check_keys(d, TRAIN_KEYS, "train config", required=("data", "architecture"))
    data = d["data"]
    check_keys(data, {"cubes", "validation_fraction"}, "data", required=("cubes",))
    cubes = [cfg.path(p, f"data.cubes[{i}]") for i, p in enumerate(data["cubes"])]
    arch = d["architecture"]
    check_keys(arch, ARCH_KEYS, "architecture", required=("input_dim", "latent_dim"))
    training = dict(d.get("training", {}))
    check_keys(training, TRAINING_KEYS, "training")
    if "mmd" in training:
        check_keys(training["mmd"], {"bandwidth", "median_heuristic", "prior_samples", "seed"},
                   "training.mmd")
    if "validation_fraction" in data:
        training["validation_fraction"] = data["validation_fraction"]
    try:
        spec = ArchitectureSpec(**arch)
        tcfg = TrainConfig(seed=int(d.get("seed", 0)), **training)
        tcfg.schedule()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training setup: {exc}") from exc
    out_sec = d.get("output", {})
    check_keys(out_sec, {"dir", "model", "log"}, "output")
    return cubes, spec, tcfg, out_sec


def cmd_train(args) -> int:
    cfg = load_config(args, "train")
    cubes, spec, tcfg, out_sec = _train_prepare(cfg)
    spectra = [flatten(load_cube(p))[0] for p in cubes]
    for p, s in zip(cubes, spectra):
        if s.shape[1] != spec.input_dim:
            raise SdcnError(f"{p}: depth {s.shape[1]} != architecture input_dim {spec.input_dim}")
    out = output_dir(cfg, args, out_sec)
    log_path = out / out_sec.get("log", "train_log.ndjson")
    result = train(np.concatenate(spectra), spec, tcfg, log_path=log_path, quiet=args.quiet)
    model_path = out / out_sec.get("model", "model.sdcn")
    save_model(result.model, model_path)
    log.info("wrote %s (best epoch %d)", model_path, result.best_epoch)
    return EXIT_OK


# -- segment -----------------------------------------------------------------------

SEG_KEYS = {"seed", "cube", "model", "krange", "init", "n_init", "silhouette_cap", "integrated",
            "output"}


def cmd_segment(args) -> int:
    cfg = load_config(args, "segment")
    d = cfg.data
    check_keys(d, SEG_KEYS, "segment config", required=("cube", "model"))
    cube_path = cfg.path(d["cube"], "cube")
    model_path = cfg.path(d["model"], "model")
    out_sec = d.get("output", {})
    check_keys(out_sec, {"dir"}, "output")
    try:
        krange = KRange(*d.get("krange", (2, 8)))
        init = Init(d.get("init", "kmeans++"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid clustering setup: {exc}") from exc
    cap = d.get("silhouette_cap")
    integrated = args.integrated or bool(d.get("integrated", False))

    cube = load_cube(cube_path)
    model = load_model(model_path)
    result = segment(cube, model, krange, init=init, seed=int(d.get("seed", 0)),
                     silhouette_cap=cap, n_init=int(d.get("n_init", 10)))
    out = output_dir(cfg, args, out_sec)
    export_result(result, out)
    if integrated:
        export_integrated_maps(integrated_maps(cube, model), out)
    log.info("k=%d silhouette=%.6f -> %s", result.k, result.silhouette, out)
    return EXIT_OK


# -- eval --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = load_config(args, "eval")
    d = cfg.data
    check_keys(d, {"seed", "labels", "result", "output"}, "eval config",
               required=("labels", "result"))
    labels_path = cfg.path(d["labels"], "labels")
    result_dir = cfg.path(d["result"], "result")
    if not (result_dir / "summary.json").is_file():
        raise ConfigError(f"result: no summary.json in {result_dir}")
    out_sec = d.get("output", {})
    check_keys(out_sec, {"dir", "metrics"}, "output")

    labels = read_pgm(labels_path)
    summary = json.loads((result_dir / "summary.json").read_text())
    masks = load_masks(result_dir)
    metrics = {
        "k": summary["k"],
        "silhouette": summary["silhouette"],
        "purity": synthgen.purity(labels, masks),
        "member_counts": summary["member_counts"],
    }
    out = output_dir(cfg, args, out_sec)
    write_json(out / out_sec.get("metrics", "metrics.json"), metrics)
    log.info("purity=%.4f silhouette=%.6f", metrics["purity"], metrics["silhouette"])
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "segment": cmd_segment, "eval": cmd_eval}


COMMAND_HELP = {
    "generate": "write a synthetic datacube (or training spectra) with ground-truth labels",
    "train": "train an autoencoder on one or more datacubes",
    "segment": "cluster a datacube in latent space and export masks and spectra",
    "eval": "score exported masks against a ground-truth label image",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdcn", description="Segment spectral datacubes by deep clustering.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMAND_HELP[name])
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", help="packaged config name, one of: "
                       + ", ".join(preset_names(name)))
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
        if name == "segment":
            p.add_argument("--integrated", action="store_true",
                           help="also write energy-integrated I/D/E maps")
    return parser


def _thread_limit():
    n = os.environ.get("SDCN_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    if not hasattr(args, "integrated"):
        args.integrated = False
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SdcnError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
