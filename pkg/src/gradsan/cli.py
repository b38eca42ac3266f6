"""Command-line entry point.

Configuration precedence: command-line flags override a ``--config`` file,
which overrides built-in defaults. Config files are flat ``key=value``
lines; ``#`` starts a comment. Keys are the flag names with underscores.

Exit codes: 0 success, 1 configuration error, 2 privacy-budget halt,
3 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from gradsan import accountant
from gradsan.autodiff import SerializationError
from gradsan.central import Evaluator, TrainConfig, template_pair, train
from gradsan.checkpoint import GeneratorCheckpoint
from gradsan.data import LabeledDataset, make_glyphs, make_ring, ring_centers, write_csv
from gradsan.federated import bug_scenario, check_conservation, make_clients, server_train
from gradsan.gan import sample
from gradsan.streams import stream

EXIT_OK, EXIT_CONFIG, EXIT_HALT, EXIT_IO = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "GRADSAN_OUTPUT_ROOT"

log = logging.getLogger("gradsan")


class ConfigError(ValueError):
    pass


@dataclass
class DataSpec:
    dataset: str = "ring"
    modes: int = 8
    n_per_mode: int = 250
    radius: float = 2.0
    ring_std: float = 0.2
    glyph_classes: int = 10
    glyph_n: int = 2000
    glyph_noise: float = 0.05
    data_seed: int | None = None  # None: derived from the root seed

    def build(self, root_seed: int) -> LabeledDataset:
        seed = self.resolved_seed(root_seed)
        if self.dataset == "ring":
            return make_ring(self.modes, self.n_per_mode, self.radius, self.ring_std, seed)
        if self.dataset == "glyphs":
            return make_glyphs(self.glyph_classes, self.glyph_n, self.glyph_noise, seed)
        raise ConfigError(f"unknown dataset {self.dataset!r} (expected ring or glyphs)")

    def resolved_seed(self, root_seed: int) -> int:
        if self.data_seed is not None:
            return self.data_seed
        return int(stream(root_seed, "data").integers(2**31))


@dataclass
class RunSpec:
    """Everything a run needs; written back out as ``config.txt``."""

    mode: str
    train: TrainConfig
    data: DataSpec
    out: str | None = None
    clients: int | None = None
    failure_rate: float = 0.0
    capture_radius: float = 0.6
    flip_fraction: float = 1.0
    probe_samples: int = 256
    bug_scenario: bool = False

    def flat(self) -> dict:
        d = {k: v for k, v in self.train.to_dict().items()}
        d.update(dataclasses.asdict(self.data))
        for f in fields(self):
            if f.name not in ("mode", "train", "data"):
                d[f.name] = getattr(self, f.name)
        return d


_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_DATA_FIELDS = {f.name: f for f in fields(DataSpec)}
_RUN_FIELDS = {f.name: f for f in fields(RunSpec) if f.name not in ("mode", "train", "data")}
ALL_KEYS = {**_TRAIN_FIELDS, **_DATA_FIELDS, **_RUN_FIELDS}


def _parse_value(key: str, raw):
    if not isinstance(raw, str):
        return raw
    f = ALL_KEYS[key]
    default = f.default if f.default is not dataclasses.MISSING else None
    if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        default = f.default_factory()  # type: ignore[misc]
    text = raw.strip()
    ann = str(f.type)
    try:
        if text.lower() in ("none", "") and "None" in ann:
            return None
        if "bool" in ann:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "tuple" in ann:
            return tuple(int(p) for p in text.split(",") if p.strip())
        if "float" in ann:
            return float(text)
        if "int" in ann or isinstance(default, int):
            return int(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def read_config_file(path) -> dict[str, str]:
    """Parse a flat ``key=value`` file; unknown keys are rejected."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in ALL_KEYS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def write_config_file(path, spec: RunSpec) -> None:
    lines = [f"# {spec.mode} run; replay with --config this-file"]
    for k, v in spec.flat().items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve(mode: str, file_values: dict, flag_values: dict) -> RunSpec:
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    unknown = set(merged) - set(ALL_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")
    values = {k: _parse_value(k, v) for k, v in merged.items()}
    if values.get("clients") is not None:
        if values["clients"] < 1:
            raise ConfigError("clients must be >= 1")
        values["gamma"] = 1.0 / values["clients"]
    try:
        tc = TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_FIELDS})
        ds = DataSpec(**{k: v for k, v in values.items() if k in _DATA_FIELDS})
        rs = RunSpec(mode, tc, ds, **{k: v for k, v in values.items() if k in _RUN_FIELDS})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if rs.data.dataset not in ("ring", "glyphs"):
        raise ConfigError(f"unknown dataset {rs.data.dataset!r} (expected ring or glyphs)")
    if not 0 <= rs.failure_rate < 1:
        raise ConfigError("failure_rate must lie in [0, 1)")
    return rs


def format_delta(delta: float) -> str:
    mant, _, exp = f"{delta:e}".partition("e")
    mant = mant.rstrip("0").rstrip(".")
    if -4 <= int(exp) < 4:
        return f"{delta:g}"
    return f"{mant}e{int(exp)}"


def epsilon_line(eps: float | None, delta: float) -> str:
    if eps is None:
        return f"epsilon=undefined (no steps taken) at delta={format_delta(delta)}"
    return f"epsilon={eps:.6g} at delta={format_delta(delta)}"


def output_dir(spec: RunSpec, name: str) -> Path:
    if spec.out:
        return Path(spec.out)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{name}-seed{spec.train.seed}"


def _evaluator(spec: RunSpec, dataset: LabeledDataset) -> Evaluator:
    if spec.data.dataset == "ring":
        # Public reference: a fresh draw from the known generator, disjoint from training data.
        ref_seed = spec.data.resolved_seed(spec.train.seed) + 1
        ref = make_ring(spec.data.modes, spec.data.n_per_mode, spec.data.radius, spec.data.ring_std, ref_seed)
        return Evaluator(ring_centers(spec.data.modes, spec.data.radius), spec.capture_radius, ref.points)
    return Evaluator()


METRIC_COLUMNS = ["step", "mode_coverage", "tvd", "mean_upstream_norm", "eps_at_delta"]


def write_metrics(path, rows: list[dict]) -> None:
    extra = sorted({k for r in rows for k in r} - set(METRIC_COLUMNS))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS + extra, restval="")
        w.writeheader()
        w.writerows(rows)


def _manifest(spec: RunSpec, dataset: LabeledDataset, extra: dict) -> dict:
    return {
        "mode": spec.mode,
        "config": spec.flat(),
        "seed": spec.train.seed,
        "dataset": {"provenance": dataset.provenance, "content_hash": dataset.content_hash(),
                    "size": len(dataset), "num_classes": dataset.num_classes},
        "warm_start": {
            "steps": spec.train.warm_steps,
            "privacy_cost_charged": False,
            "note": "critics are pre-trained on private shards at zero recorded cost; only the "
                    "generator is released, so this relies on post-processing of the generator alone",
        },
        "non_private": spec.train.non_private or spec.train.sigma == 0,
        **extra,
    }


def _write_common(out: Path, spec: RunSpec, dataset, ledger, metrics, checkpoint, extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(spec, dataset, extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n",
                                       encoding="utf-8")
    ledger.write_jsonl(out / "ledger.jsonl")
    write_metrics(out / "metrics.csv", metrics)
    checkpoint.save(out / "generator.ckpt")
    write_config_file(out / "config.txt", spec)


def cmd_train_central(spec: RunSpec) -> int:
    dataset = spec.data.build(spec.train.seed)
    res = train(dataset, spec.train, evaluator=_evaluator(spec, dataset))
    out = output_dir(spec, "central")
    _write_common(out, spec, dataset, res.ledger, res.metrics, res.checkpoint,
                  {"halted": res.halted, "steps_done": res.steps_done, "num_shards": spec.train.num_shards})
    print(f"wrote {out}")
    print(epsilon_line(res.epsilon, spec.train.delta))
    return EXIT_HALT if res.halted else EXIT_OK


def cmd_train_federated(spec: RunSpec) -> int:
    if spec.bug_scenario:
        return cmd_bug_scenario(spec)
    dataset = spec.data.build(spec.train.seed)
    clients = make_clients(dataset, spec.train)
    res = server_train(clients, spec.train, failure_rate=spec.failure_rate, evaluator=_evaluator(spec, dataset))
    check_conservation(clients, res.wire)
    out = output_dir(spec, "federated")
    _write_common(out, spec, dataset, res.ledger, res.metrics, res.checkpoint, {
        "halted": res.halted, "steps_done": res.steps_done, "aborted_steps": res.aborted_steps,
        "federated": res.notes, "ledger_gamma": res.ledger.gamma,
        "wire": {"down_bytes": res.wire.down_total, "up_bytes": res.wire.up_total},
    })
    res.wire.write_csv(out / "wire.csv")
    print(f"wrote {out}")
    print(f"wire: server->clients {res.wire.down_total} bytes, clients->server {res.wire.up_total} bytes")
    print(epsilon_line(res.epsilon, spec.train.delta))
    return EXIT_HALT if res.halted else EXIT_OK


def cmd_bug_scenario(spec: RunSpec) -> int:
    if spec.data.dataset != "glyphs":
        raise ConfigError("the bug scenario needs --dataset glyphs")
    clients = spec.clients or 10
    cfg = dataclasses.replace(spec.train, gen_output="sigmoid") if spec.train.gen_output == "linear" else spec.train
    dataset = spec.data.build(spec.train.seed)
    report = bug_scenario(dataset, clients, spec.flip_fraction, cfg, n_probe=spec.probe_samples)
    out = output_dir(spec, "bug")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    for name, ck in report.checkpoints.items():
        ck.save(out / f"generator-{name}.ckpt")
    write_config_file(out / "config.txt", spec)
    print(f"wrote {out}")
    print(f"suspected pool mean intensity={report.suspected_mean:.4f}")
    print(f"clean pool mean intensity={report.clean_mean:.4f}")
    print(f"welch t={report.t_statistic:.3f} p={report.p_value:.3g} inverted={report.inverted} "
          f"bimodal={report.bimodal}")
    return EXIT_OK


def cmd_accountant(args) -> int:
    if args.sigma <= 0:
        raise ConfigError("sigma must be positive for a privacy query")
    if args.steps == 0:
        print(f"epsilon undefined: no steps taken (delta={format_delta(args.delta)})")
        return EXIT_OK
    try:
        eps, order = accountant.query(args.sigma, args.gamma, args.batch_size, args.steps, args.delta)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    print(f"best_order={order}")
    print(epsilon_line(eps, args.delta))
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.n < 0:
        raise ConfigError("n must be non-negative")
    ck = GeneratorCheckpoint.load(args.checkpoint)
    pair = template_pair(ck.spec.output_dim, ck.num_classes,
                         TrainConfig(latent_dim=ck.latent_dim, gen_hidden=ck.spec.hidden))
    pair = dataclasses.replace(pair, gen_spec=ck.spec, gen_params=ck.params)
    x, labels = sample(pair, args.n, stream(args.seed, "sample"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, x, labels)
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; flags override it")
    for name, f in ALL_KEYS.items():
        flag = "--" + name.replace("_", "-")
        ann = str(f.type)
        if "bool" in ann:
            p.add_argument(flag, dest=name, action="store_const", const="true", default=None)
        else:
            p.add_argument(flag, dest=name, default=None, metavar=name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradsan", description="Differentially private GAN training "
                                     "with sanitized generator gradients")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("train-central", "train a generator against K sanitized critics in one process"),
                       ("train-federated", "train with one critic per client over a byte-level wire"),
                       ("bug-scenario", "compare generators trained on suspected and clean client pools")):
        _add_run_flags(sub.add_parser(name, help=text))
    acc = sub.add_parser("accountant", help="privacy cost of a planned run; reads no data")
    acc.add_argument("--sigma", type=float, default=1.07)
    acc.add_argument("--gamma", type=float, default=0.1)
    acc.add_argument("--batch-size", type=int, default=32)
    acc.add_argument("--steps", type=int, default=2000)
    acc.add_argument("--delta", type=float, default=1e-5)
    smp = sub.add_parser("sample", help="draw labelled samples from a generator checkpoint")
    smp.add_argument("--checkpoint", required=True)
    smp.add_argument("--n", type=int, default=1000)
    smp.add_argument("--seed", type=int, default=0)
    smp.add_argument("--out", required=True)
    return parser


_MODES = {"train-central": "central", "train-federated": "federated", "bug-scenario": "bug-scenario"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "accountant":
            return cmd_accountant(args)
        if args.command == "sample":
            return cmd_sample(args)
        file_values = read_config_file(args.config) if args.config else {}
        flags = {k: getattr(args, k) for k in ALL_KEYS}
        spec = resolve(_MODES[args.command], file_values, flags)
        if args.command == "train-central":
            return cmd_train_central(spec)
        if args.command == "train-federated":
            return cmd_train_federated(spec)
        return cmd_bug_scenario(spec)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, SerializationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
