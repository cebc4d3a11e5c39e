"""``dustlab`` command line: data generation, decomposition, training, evaluation, benchmarks.

Usage::

    dustlab <command> [--config run.json] [--section.key value]...

The JSON config holds one object per section (``data``, ``godec``, ``graph``,
``solver``, ``network``, ``train``, ``bench``, ``io``). Dotted flags override
single keys. Exit status is 0 on success, 1 on usage or input errors and 2 on
numerical failure.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .data import SyntheticConfig, build_dataset, load_dataset, save_dataset
from .errors import FormatError, NumericalError, UsageError
from .godec import GoDecConfig, godec_mask
from .graph import GraphConfig
from .network import CORONA, DUST, NetworkConfig, load_checkpoint, save_checkpoint
from .solver import SolverConfig
from .training import HISTORY_COLUMNS, TrainConfig, train

log = logging.getLogger("dustlab")

COMMANDS = ("gen-data", "decompose", "godec-mask", "train", "eval", "bench-mask", "report")


@dataclasses.dataclass(frozen=True)
class IOConfig:
    output_dir: str = "out"
    dataset: str = ""
    checkpoint: str = ""
    checkpoints: dict = dataclasses.field(default_factory=dict)
    histories: list = dataclasses.field(default_factory=list)
    split: str = "test"
    index: int = 0
    dump_frames: bool = True
    rho: float = 1.0


SECTIONS = {
    "data": SyntheticConfig,
    "godec": GoDecConfig,
    "graph": GraphConfig,
    "solver": SolverConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "bench": bench.BenchConfig,
    "io": IOConfig,
}

ALIASES = {("solver", "lambda"): "lam", ("solver", "gamma_1"): "gamma1", ("solver", "gamma_2"): "gamma2"}


# -- configuration -------------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _canonical(section, key):
    return ALIASES.get((section, key), key)


def merge_overrides(doc, overrides):
    """Apply ``[("section.key", value), ...]`` onto a config document (copied)."""
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in doc.items()}
    for path, value in overrides:
        parts = path.split(".")
        if len(parts) != 2:
            raise UsageError(f"override {path!r} must look like section.key")
        section, key = parts
        out.setdefault(section, {})
        if not isinstance(out[section], dict):
            raise UsageError(f"config section {section!r} is not an object")
        out[section][key] = value
    return out


def build_configs(doc):
    """Turn a config document into section dataclasses; unknown sections or keys are errors."""
    configs = {}
    for section, values in doc.items():
        if section not in SECTIONS:
            raise UsageError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise UsageError(f"config section {section!r} must be an object")
    for section, cls in SECTIONS.items():
        fields = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in doc.get(section, {}).items():
            name = _canonical(section, key)
            if name not in fields:
                raise UsageError(f"unknown key {section}.{key}")
            kwargs[name] = tuple(value) if isinstance(value, list) and name != "histories" else value
        try:
            configs[section] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid {section} config: {exc}") from exc
    return configs


def parse_args(argv):
    parser = argparse.ArgumentParser(prog="dustlab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    args, rest = parser.parse_known_args(argv)
    overrides = []
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        if "=" in tok:
            key, text = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise UsageError(f"flag {tok!r} needs a value")
            key, text = tok[2:], rest[i + 1]
            i += 2
        overrides.append((key, _parse_value(text)))
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config document must be a JSON object")
    doc = merge_overrides(doc, overrides)
    return args, doc, build_configs(doc)


def _require_file(path, what):
    if not path:
        raise UsageError(f"{what} path is required (io.{what})")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file {p} does not exist")
    return p


def validate_inputs(command, cfg):
    """Check every input path a command reads before anything is written."""
    io = cfg["io"]
    if command in ("decompose", "godec-mask", "train", "eval"):
        _require_file(io.dataset, "dataset")
    if command == "bench-mask" and io.dataset:
        _require_file(io.dataset, "dataset")
    if command == "eval":
        paths = list(io.checkpoints.values()) + ([io.checkpoint] if io.checkpoint else [])
        if not paths:
            raise UsageError("eval needs io.checkpoint or io.checkpoints")
        for path in paths:
            _require_file(path, "checkpoint")
    if command == "report":
        if not io.histories:
            raise UsageError("report needs io.histories (a list of history.csv files)")
        for path in io.histories:
            _require_file(path, "history")


# -- commands ------------------------------------------------------------------

def _sample(cfg):
    ds = load_dataset(_require_file(cfg["io"].dataset, "dataset"))
    split = cfg["io"].split
    if split not in ("train", "test"):
        raise UsageError(f"io.split must be train or test, got {split!r}")
    samples = getattr(ds, split)
    if not 0 <= cfg["io"].index < len(samples):
        raise UsageError(f"io.index {cfg['io'].index} outside the {len(samples)} {split} samples")
    return ds, samples[cfg["io"].index]


def cmd_gen_data(cfg, out):
    ds = build_dataset(cfg["data"], cfg["godec"] if "godec" in cfg["_doc"] else None)
    path = out / "dataset.bin"
    save_dataset(path, ds)
    d = cfg["data"]
    bench.write_csv(out / "manifest.csv",
                    ("file", "train", "test", "m", "n", "q", "rank", "foreground", "seed"),
                    [{"file": path.name, "train": len(ds.train), "test": len(ds.test),
                      "m": d.m, "n": d.n, "q": d.q, "rank": d.rank,
                      "foreground": d.foreground, "seed": d.seed}])
    return [path, out / "manifest.csv"]


def cmd_decompose(cfg, out):
    ds, sample = _sample(cfg)
    L, S, row = bench.decompose_sample(sample, cfg["solver"], cfg["graph"], cfg["io"].rho)
    row = {"split": cfg["io"].split, "index": cfg["io"].index, **row}
    columns = ("split", "index", "rel_err_L", "rel_err_S", "iterations", "converged", "seconds")
    bench.write_csv(out / "decompose.csv", columns, [row])
    np.save(out / "L_hat.npy", L)
    np.save(out / "S_hat.npy", S)
    written = [out / "decompose.csv", out / "L_hat.npy", out / "S_hat.npy"]
    if cfg["io"].dump_frames:
        frames = out / "frames"
        frames.mkdir(exist_ok=True)
        for name, M in (("D", sample.D), ("L", L), ("S", S)):
            written += bench.dump_frames(frames, name, M, ds.m, ds.n)
    return written


def cmd_godec_mask(cfg, out):
    ds, sample = _sample(cfg)
    rank = min(cfg["data"].rank + 1, ds.q - 1)
    gcfg = cfg["godec"] if "rank_g" in cfg["_doc"].get("godec", {}) else dataclasses.replace(
        cfg["godec"], rank_g=rank)
    prior = godec_mask(sample.D, gcfg, seed=cfg["io"].index)
    truth = sample.S_true > 0
    row = {"split": cfg["io"].split, "index": cfg["io"].index,
           "foreground_fraction": float(prior.fg_mask.mean()),
           "agree_truth": bench.mask_agreement(prior.fg_mask, truth)}
    bench.write_csv(out / "godec_mask.csv", tuple(row), [row])
    written = [out / "godec_mask.csv"]
    if cfg["io"].dump_frames:
        frames = out / "frames"
        frames.mkdir(exist_ok=True)
        written += bench.dump_frames(frames, "mask", prior.fg_mask, ds.m, ds.n)
    return written


def _net_cfg(cfg, ds):
    return dataclasses.replace(cfg["network"], frame_dims=(ds.m, ds.n), frames=ds.q)


def cmd_train(cfg, out):
    ds = load_dataset(_require_file(cfg["io"].dataset, "dataset"))
    net = _net_cfg(cfg, ds)
    params, history = train(ds, net, cfg["train"], graph_cfg=cfg["graph"])
    save_checkpoint(out / "model.bin", params)
    bench.write_csv(out / "history.csv", HISTORY_COLUMNS, history)
    return [out / "model.bin", out / "history.csv"]


def cmd_eval(cfg, out):
    ds = load_dataset(_require_file(cfg["io"].dataset, "dataset"))
    checkpoints = dict(cfg["io"].checkpoints)
    if cfg["io"].checkpoint:
        checkpoints.setdefault(cfg["network"].variant, cfg["io"].checkpoint)
    if not checkpoints:
        raise UsageError("eval needs io.checkpoint or io.checkpoints")
    rows = []
    for variant, path in checkpoints.items():
        if variant not in (DUST, CORONA):
            raise UsageError(f"unknown variant {variant!r} in io.checkpoints")
        params = load_checkpoint(_require_file(path, "checkpoint"), ds.m * ds.n, ds.q)
        net = bench.network_config_for(params, cfg["network"], ds, variant)
        rows.append(bench.evaluate_variant(ds.test, params, net, cfg["graph"], cfg["train"].batch_size))
    bench.write_csv(out / "metrics.csv", bench.EVAL_COLUMNS, rows)
    return [out / "metrics.csv"]


def cmd_bench_mask(cfg, out):
    b = cfg["bench"]
    if cfg["io"].dataset:
        ds = load_dataset(_require_file(cfg["io"].dataset, "dataset"))
        samples = getattr(ds, cfg["io"].split)[: b.samples]
        inputs = [(f"{cfg['io'].split}_{i:03d}", s.D, s.S_true > 0) for i, s in enumerate(samples)]
    else:
        inputs = bench.planted_inputs(b)
    godec_cfg = cfg["godec"] if "godec" in cfg["_doc"] else None
    rows = bench.bench_mask(inputs, godec_cfg, cfg["solver"], b.repeats, b.seed)
    bench.write_csv(out / "bench_mask.csv", bench.BENCH_COLUMNS, rows)
    return [out / "bench_mask.csv"]


def cmd_report(cfg, out):
    """Loss curves with 5-epoch moving averages for each history file listed in io.histories."""
    if not cfg["io"].histories:
        raise UsageError("report needs io.histories (a list of history.csv files)")
    rows = []
    for path in cfg["io"].histories:
        hist = bench.read_csv(_require_file(path, "history"))
        for split in ("train", "test"):
            sel = [r for r in hist if r["split"] == split]
            if not sel:
                continue
            smooth = {c: bench.moving_average([float(r[c]) for r in sel])
                      for c in ("loss_total", "loss_L", "loss_S")}
            for i, r in enumerate(sel):
                rows.append({"run": Path(path).parent.name or str(path), "split": split,
                             "epoch": int(r["epoch"]),
                             **{c: float(r[c]) for c in smooth},
                             **{f"{c}_ma5": float(smooth[c][i]) for c in smooth}})
    columns = ("run", "split", "epoch", "loss_total", "loss_L", "loss_S",
               "loss_total_ma5", "loss_L_ma5", "loss_S_ma5")
    bench.write_csv(out / "curves.csv", columns, rows)
    return [out / "curves.csv"]


HANDLERS = {
    "gen-data": cmd_gen_data,
    "decompose": cmd_decompose,
    "godec-mask": cmd_godec_mask,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-mask": cmd_bench_mask,
    "report": cmd_report,
}


def run(argv=None):
    """Parse, validate and dispatch; returns the process exit code."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args, doc, cfg = parse_args(sys.argv[1:] if argv is None else argv)
        validate_inputs(args.command, cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return 1
    except SystemExit as exc:  # argparse reports bad commands this way
        return 1 if exc.code else 0
    cfg["_doc"] = doc
    out = Path(cfg["io"].output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.command}.config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        written = HANDLERS[args.command](cfg, out)
    except (UsageError, FormatError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1
    except (NumericalError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return 2
    frames = [p for p in written if p.suffix == ".pgm"]
    for path in written:
        if path.suffix != ".pgm":
            log.info("wrote %s", path)
    if frames:
        log.info("wrote %d PGM frames under %s", len(frames), frames[0].parent)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
