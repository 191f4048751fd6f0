"""Command-line entry point: ``partialcycle <command> [options]``.

Every command reads an optional key-value config file (``key = value`` per
line, ``#`` starts a comment), applies flag overrides on top, and writes the
resolved configuration to ``resolved_config.txt`` in its output directory.
Output directories default to ``$PARTIALCYCLE_OUT/<command>`` (or
``runs/<command>`` when the variable is unset).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 verification
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .cycles import VARIANTS
from .experiment import cached_cell, format_table, mean_std
from .gradcheck import check_gradients, masked_batch_problem
from .inference import InferenceConfig, evaluate, tune_theta
from .scenes import DatasetError, SceneConfig, generate_scene, overlap_stats, read_jsonl, reduce_fov, write_jsonl
from .theory import (InconsistentMatchingError, check_consistency, mutate, proposition1_verify,
                     random_consistent_matching)
from .training import (CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint,
                       train)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4
OUT_ENV = "PARTIALCYCLE_OUT"

log = logging.getLogger("partialcycle")


class ConfigError(ValueError):
    pass


class VerificationFailed(RuntimeError):
    pass


# ---------------------------------------------------------------- config

def _scene_fields():
    return {f.name: f for f in dataclasses.fields(SceneConfig) if f.name not in ("seed", "split")}


def _train_fields():
    return {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "seed"}


# keys that belong to the harness itself, with their defaults
HARNESS_KEYS = {
    "seed": "0",
    "out": "",
    "data": "",
    "checkpoint": "",
    "keep_fraction": "1.0",
    "theta_grid": ",".join(f"{0.05 * i:.2f}" for i in range(20)),
    "seeds": "0,1,2,3,4",
    "grid_masking": "on,off",
    "grid_cycles": "v1;v0,v1,v2,v3",
    "grid_keep": "1.0,0.8,0.6",
    "instances": "1000",
    "batches": "10",
    "inject": "off",
}


def known_keys() -> set:
    return set(HARNESS_KEYS) | set(_scene_fields()) | set(_train_fields())


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; blank lines and ``#`` comments ignored; unknown keys rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known_keys():
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"expected on/off, got {value!r}")


def parse_cycles(value: str) -> tuple:
    names = tuple(s.strip() for s in value.split(",") if s.strip())
    bad = [n for n in names if n not in VARIANTS]
    if bad or not names:
        raise ConfigError(f"invalid cycle set {value!r}; choose from {','.join(VARIANTS)}")
    return names


def _convert(field: dataclasses.Field, value: str):
    name = field.name
    default = field.default if field.default is not dataclasses.MISSING else field.default_factory()
    try:
        if name == "variants":
            return parse_cycles(value)
        if name == "fov_width":
            parts = [float(s) for s in value.split(",")]
            return parts[0] if len(parts) == 1 else tuple(parts)
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {value!r} ({exc})") from exc


@dataclasses.dataclass
class RunConfig:
    values: dict

    def get(self, key: str) -> str:
        return self.values.get(key, HARNESS_KEYS.get(key, ""))

    def int(self, key: str) -> int:
        try:
            return int(self.get(key))
        except ValueError as exc:
            raise ConfigError(f"{key} must be an integer") from exc

    def floats(self, key: str) -> list[float]:
        try:
            return [float(s) for s in self.get(key).split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"{key} must be a comma-separated list of numbers") from exc

    def scene(self) -> SceneConfig:
        fields = _scene_fields()
        kw = {k: _convert(fields[k], v) for k, v in self.values.items() if k in fields}
        try:
            return SceneConfig(seed=self.int("seed"), **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train(self) -> TrainConfig:
        fields = _train_fields()
        kw = {k: _convert(fields[k], v) for k, v in self.values.items() if k in fields}
        try:
            return TrainConfig(seed=self.int("seed"), **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def inference(self) -> InferenceConfig:
        try:
            return InferenceConfig(grid=tuple(self.floats("theta_grid")))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def render(self) -> str:
        """Every key this run could read, resolved, in config-file syntax."""
        merged = dict(HARNESS_KEYS)
        for name, f in {**_scene_fields(), **_train_fields()}.items():
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            merged[name] = _render_value(default)
        merged.update(self.values)
        return "".join(f"{k} = {merged[k]}\n" for k in sorted(merged))


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _output_dir(cfg: RunConfig, command: str) -> Path:
    out = cfg.get("out")
    root = Path(os.environ.get(OUT_ENV, "runs"))
    path = Path(out) if out else root / command
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    (out / "resolved_config.txt").write_text(cfg.render())


# ---------------------------------------------------------------- commands

def _data_path(cfg: RunConfig, split: str) -> Path:
    data = cfg.get("data")
    if not data:
        raise ConfigError("no dataset given (use --data or 'data = ...')")
    path = Path(data)
    path = path / f"{split}.jsonl" if path.is_dir() or not path.suffix else path
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    return path


def _load_split(cfg: RunConfig, split: str):
    return read_jsonl(_data_path(cfg, split))


def cmd_generate(cfg: RunConfig) -> int:
    out = _output_dir(cfg, "generate")
    scene = cfg.scene()
    keep = cfg.floats("keep_fraction")[0]
    for split in ("train", "val", "test"):
        ds = generate_scene(scene.replace(split=split))
        if split == "train" and keep < 1.0:
            ds = reduce_fov(ds, keep)
        write_jsonl(ds, out / f"{split}.jsonl")
        st = overlap_stats(ds)
        print(f"{split}: {len(ds)} frames, two-camera Jaccard {st.two_camera_jaccard:.3f}, "
              f"three-camera Jaccard {st.three_camera_jaccard:.3f}, people/frame {st.people_per_frame:.1f}")
    _write_resolved(cfg, out)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    tcfg = cfg.train()
    ds = _load_split(cfg, "train")
    keep = cfg.floats("keep_fraction")[0]
    if keep < 1.0:
        ds = reduce_fov(ds, keep)
    out = _output_dir(cfg, "train")
    _write_resolved(cfg, out)
    result = train(ds, tcfg)
    save_checkpoint(result.encoder, out / "checkpoint.txt", tcfg)
    with (out / "losses.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for e, loss in enumerate(result.epoch_losses):
            w.writerow([e, repr(loss)])
    print(f"trained {result.steps} steps ({result.skipped} skipped); "
          f"final mean loss {result.epoch_losses[-1] if result.epoch_losses else float('nan'):.5f}")
    print(f"checkpoint: {out / 'checkpoint.txt'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    ckpt = cfg.get("checkpoint")
    if not ckpt:
        raise ConfigError("no checkpoint given (use --checkpoint)")
    enc, _ = load_checkpoint(ckpt)
    inf = cfg.inference()
    val, test = _load_split(cfg, "val"), _load_split(cfg, "test")
    for ds in (val, test):
        if ds.obs_dim != enc.obs_dim:
            raise DatasetError(f"checkpoint expects {enc.obs_dim}-d features, dataset has {ds.obs_dim}")
    out = _output_dir(cfg, "eval")
    _write_resolved(cfg, out)
    theta = tune_theta(enc, val, inf)
    report = evaluate(enc, test, dataclasses.replace(inf, theta=theta))
    report.write_csv(out / "instances.csv", out / "summary.csv")
    o = report.overall
    print(f"theta {theta:.2f}: precision {o['precision']:.4f} recall {o['recall']:.4f} f1 {o['f1']:.4f}")
    return EXIT_OK


def _grid_cells(cfg: RunConfig):
    base = cfg.train()
    cells = []
    for cycles in cfg.get("grid_cycles").split(";"):
        variants = parse_cycles(cycles)
        for masking in (_parse_bool(s) for s in cfg.get("grid_masking").split(",")):
            name = f"{'+'.join(variants)}|{'masked' if masking else 'unmasked'}|{base.sampler}"
            cells.append((name, dataclasses.replace(base, variants=variants, masking=masking)))
    return cells


def cmd_experiment(cfg: RunConfig) -> int:
    out = _output_dir(cfg, "experiment")
    _write_resolved(cfg, out)
    scene = cfg.scene()
    seeds = [int(s) for s in cfg.floats("seeds")]
    keeps = cfg.floats("grid_keep")
    grid = cfg.floats("theta_grid")
    results = []
    for name, tcfg in _grid_cells(cfg):
        for keep in keeps:
            for seed in seeds:
                res = cached_cell(out / "cells", name.replace("|", "__").replace("+", "-"),
                                  scene, tcfg, seed, keep, grid)
                res.name = name
                results.append(res)
                print(f"{name} keep={keep:.2f} seed={seed}: f1 {res.f1:.4f}", flush=True)
    names = [n for n, _ in _grid_cells(cfg)]
    table = format_table(results, names, keeps)
    (out / "table.txt").write_text(table + "\n")
    with (out / "results.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "keep_fraction", "seeds", "f1_mean", "f1_std", "two_camera_jaccard"])
        for name in names:
            for keep in keeps:
                rows = [r for r in results if r.name == name and r.keep_fraction == keep]
                m, s = mean_std(r.f1 for r in rows)
                j = float(np.mean([r.two_camera_jaccard for r in rows]))
                w.writerow([name, f"{keep:.2f}", len(rows), f"{m:.6f}", f"{s:.6f}", f"{j:.6f}"])
    print(table)
    return EXIT_OK


def cmd_verify_theory(cfg: RunConfig) -> int:
    out = _output_dir(cfg, "verify-theory")
    _write_resolved(cfg, out)
    rng = np.random.default_rng(cfg.int("seed"))
    n = cfg.int("instances")
    start = time.perf_counter()
    failures = 0
    for idx in range(n):
        m = random_consistent_matching(int(rng.integers(3, 6)), int(rng.integers(1, 9)),
                                       float(rng.uniform(0.3, 1.0)), int(rng.integers(2 ** 31)))
        verdict = proposition1_verify(m)
        if not verdict:
            failures += 1
            print(f"instance {idx}: {verdict.violations[:3]}")
    print(f"{n - failures}/{n} instances satisfy the cycle identities ({time.perf_counter() - start:.2f}s)")
    if _parse_bool(cfg.get("inject")):
        while True:
            m = random_consistent_matching(4, 6, 0.8, int(rng.integers(2 ** 31)))
            mutated = mutate(m, rng)
            if mutated is not None:
                break
        bad, (i, j, a, b) = mutated
        verdict = check_consistency(bad)
        print(f"injected: removed link {a}->{b} between views {i} and {j}")
        for v in verdict.violations[:5]:
            print(f"violation: {v}")
        try:
            proposition1_verify(bad)
        except InconsistentMatchingError:
            pass
        failures += 1
    if failures:
        raise VerificationFailed(f"{failures} failing instance(s)")
    return EXIT_OK


def cmd_grad_check(cfg: RunConfig) -> int:
    out = _output_dir(cfg, "grad-check")
    _write_resolved(cfg, out)
    rng = np.random.default_rng(cfg.int("seed"))
    worst = 0.0
    for mode in ("literal", "row_select"):
        for b in range(cfg.int("batches")):
            fn, params = masked_batch_problem(rng, mask_mode=mode)
            rep = check_gradients(fn, params)
            worst = max(worst, rep.max_rel_error)
            print(f"{mode} batch {b}: {rep.entries} entries, max relative error {rep.max_rel_error:.3e}")
    print(f"max relative error {worst:.3e}")
    if not worst < 1e-4:
        raise VerificationFailed(f"gradient mismatch: max relative error {worst:.3e}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "verify-theory": cmd_verify_theory,
    "grad-check": cmd_grad_check,
}


# ---------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partialcycle", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key-value config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", help="global seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        if name in ("generate", "train", "experiment"):
            p.add_argument("--fov", help="camera field-of-view width (fov_width)")
            p.add_argument("--keep", help="keep_fraction for FOV reduction of training data")
        if name in ("train", "eval"):
            p.add_argument("--data", help="dataset directory or .jsonl file")
        if name in ("train", "experiment"):
            p.add_argument("--masking", choices=["on", "off"])
            p.add_argument("--cycles", help="comma-separated subset of v0,v1,v2,v3")
            p.add_argument("--sampler", choices=["standard", "time-divergent"])
            p.add_argument("--epochs")
        if name == "eval":
            p.add_argument("--checkpoint")
        if name == "experiment":
            p.add_argument("--seeds", help="comma-separated seeds")
        if name == "verify-theory":
            p.add_argument("--instances")
            p.add_argument("--inject", choices=["on", "off"],
                           help="also check an inconsistent instance (fails by design)")
        if name == "grad-check":
            p.add_argument("--batches")
    return parser


FLAG_KEYS = {"out": "out", "seed": "seed", "fov": "fov_width", "keep": "keep_fraction", "data": "data",
             "masking": "masking", "cycles": "variants", "sampler": "sampler", "epochs": "epochs",
             "checkpoint": "checkpoint", "seeds": "seeds", "instances": "instances",
             "inject": "inject", "batches": "batches"}


def resolve(args: argparse.Namespace) -> RunConfig:
    values = load_config_file(args.config) if args.config else {}
    for item in args.set:
        values.update(parse_config_text(item, "--set"))
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = str(v)
    cfg = RunConfig(values)
    if "variants" in values:
        parse_cycles(values["variants"])
    cfg.scene(), cfg.train()  # surface bad values before any work starts
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, TrainingDiverged) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
