"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 domain or usage error, 2 I/O error.  Option values
resolve as built-in default < ``--config`` file < explicit flag.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import InvalidArgument, RoadNoiseError
from .modelfile import load_model, save_model, serialized_size
from .quant import quantize_model
from .runtime import ClassificationStream, StreamConfig, bench, classify_clip
from .signal import FeatureConfig, extract_logmel
from .synth import CorpusManifest, SynthSpec, synth_corpus
from .train import TrainConfig, grad_check, load_examples, train_arrays
from .wavio import pcm16_to_float, read_wav

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-4

log = logging.getLogger("roadnoise")


class UsageError(Exception):
    pass


class ConfigError(RoadNoiseError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2; usage errors are 1 here
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage().rstrip()}")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise ValueError(f"{text} is not an unsigned 64-bit integer")
    return v


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable[[str], Any] = str
    default: Any = None
    required: bool = False
    switch: bool = False
    choices: tuple[str, ...] | None = None
    help: str = ""

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


FEATURE_OPTS = (
    Opt("frame_len", int, 1024, help="STFT frame length (power of two)"),
    Opt("hop", int, 512, help="STFT hop in samples"),
    Opt("n_mels", int, 64, help="number of mel bands"),
    Opt("f_min_hz", float, 50.0),
    Opt("f_max_hz", float, 8000.0),
)
GLOBAL_OPTS = (
    Opt("config", Path, help="key=value file of option defaults"),
    Opt("seed", _u64, 0, help="master seed for every random draw"),
)

COMMANDS: dict[str, tuple[str, tuple[Opt, ...]]] = {
    "synth": (
        "synthesize a labelled WAV corpus",
        (
            Opt("out", Path, required=True, help="output directory"),
            Opt("clips_per_class", int, 300),
            Opt("duration_s", float, 1.0),
            Opt("overwrite", _bool, False, switch=True),
        ),
    ),
    "features": (
        "dump log-mel features of a corpus as .fm.csv files",
        (
            Opt("manifest", Path, required=True),
            Opt("out_dir", Path, required=True),
            *FEATURE_OPTS,
        ),
    ),
    "train": (
        "train a classifier on a corpus",
        (
            Opt("arch", str, "cnn", choices=("cnn", "ast")),
            Opt("manifest", Path, required=True),
            Opt("epochs", int, 10),
            Opt("out", Path, required=True, help="model file (RNM1)"),
            Opt("lr", float, 0.01),
            Opt("momentum", float, 0.9),
            Opt("batch_size", int, 16),
            Opt("val_fraction", float, 0.1),
            Opt("report", Path, help="epoch report (default: <out stem>.report.jsonl)"),
            *FEATURE_OPTS,
        ),
    ),
    "quantize": (
        "int8-quantize a float CNN, calibrating on a corpus",
        (
            Opt("model", Path, required=True),
            Opt("manifest", Path, required=True),
            Opt("out", Path, required=True),
            *FEATURE_OPTS,
        ),
    ),
    "classify": (
        "stream audio through a model and log classification events",
        (
            Opt("model", Path, required=True),
            Opt("wav", Path),
            Opt("stdin_pcm", _bool, False, switch=True, help="read raw s16le mono 44.1 kHz from stdin"),
            Opt("events", Path, required=True, help="JSON-lines event log"),
            Opt("no_latency", _bool, False, switch=True, help="write latency_ms as 0 (reproducible logs)"),
            *FEATURE_OPTS,
        ),
    ),
    "gradcheck": (
        "finite-difference gradient check on a tiny model",
        (Opt("arch", str, "cnn", choices=("cnn", "ast")),),
    ),
    "bench": (
        "measure per-window latency",
        (
            Opt("model", Path, required=True),
            Opt("wav", Path, required=True),
            Opt("repetitions", int, 30),
            *FEATURE_OPTS,
        ),
    ),
}

ALL_KEYS = frozenset(o.name for _, opts in COMMANDS.values() for o in opts) | {"seed"}
_LINE = re.compile(r"^\s*([A-Za-z][A-Za-z0-9_-]*)\s*=\s*(.*?)\s*$")


def parse_config(path: str | Path) -> dict[str, str]:
    """Read ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    text = Path(path).read_text()
    for no, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = _LINE.match(line)
        if m is None:
            raise ConfigError(f"{path}:{no}: malformed line {line.strip()!r} (expected key=value)")
        key = m.group(1).replace("-", "_")
        if key not in ALL_KEYS:
            raise ConfigError(f"{path}:{no}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{path}:{no}: duplicate key {key!r}")
        out[key] = m.group(2)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="roadnoise", description="Road-surface recognition from tyre noise.", allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, allow_abbrev=False)
        for o in GLOBAL_OPTS + opts:
            if o.switch:
                p.add_argument(o.flag, dest=o.name, action="store_const", const=True, default=None, help=o.help)
            else:
                p.add_argument(o.flag, dest=o.name, default=None, choices=o.choices, help=o.help, type=str)
    return parser


def _convert(o: Opt, raw: str, source: str) -> Any:
    if o.choices and raw not in o.choices:
        raise UsageError(f"{source}: {o.name} must be one of {', '.join(o.choices)}, got {raw!r}")
    try:
        return o.type(raw)
    except ValueError as exc:
        raise UsageError(f"{source}: invalid value for {o.name}: {exc}") from exc


def resolve_options(args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, config file and explicit flags for one subcommand."""
    opts = GLOBAL_OPTS + COMMANDS[args.command][1]
    values = {o.name: o.default for o in opts}
    cli_config = getattr(args, "config", None)
    file_values = parse_config(cli_config) if cli_config else {}
    by_name = {o.name: o for o in opts}
    for key, raw in file_values.items():
        if key in by_name:  # keys of other subcommands are ignored
            values[key] = _convert(by_name[key], raw, str(cli_config))
    # Feature keys are validated even by subcommands that do not use them.
    feats = {o.name: _convert(o, file_values[o.name], str(cli_config)) for o in FEATURE_OPTS if o.name in file_values}
    if feats:
        FeatureConfig(**feats)
    for o in opts:
        raw = getattr(args, o.name)
        if raw is None:
            continue
        values[o.name] = raw if o.switch else _convert(o, raw, o.flag)
    missing = [by_name[k].flag for k, o in by_name.items() if o.required and values[k] is None]
    if missing:
        raise UsageError(f"roadnoise {args.command}: missing required option(s): {', '.join(missing)}")
    return values


def _features(v: dict) -> FeatureConfig:
    return FeatureConfig(
        frame_len=v["frame_len"], hop=v["hop"], n_mels=v["n_mels"], f_min_hz=v["f_min_hz"], f_max_hz=v["f_max_hz"]
    )


# --- subcommands ----------------------------------------------------------------


def cmd_synth(v: dict) -> int:
    spec = SynthSpec(v["clips_per_class"], v["out"], v["seed"], v["duration_s"])
    manifest = synth_corpus(spec, overwrite=v["overwrite"])
    print(manifest.root / CorpusManifest.MANIFEST_NAME)
    return EXIT_OK


def cmd_features(v: dict) -> int:
    cfg = _features(v)
    manifest = CorpusManifest.load(v["manifest"])
    out = Path(v["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        fm = extract_logmel(read_wav(manifest.resolve(entry)), cfg)
        (out / (Path(entry.path).stem + ".fm.csv")).write_text(fm.to_csv())
    print(out)
    return EXIT_OK


def cmd_train(v: dict) -> int:
    config = TrainConfig(
        arch=v["arch"],
        epochs=v["epochs"],
        learning_rate=v["lr"],
        momentum=v["momentum"],
        batch_size=v["batch_size"],
        seed=v["seed"],
        val_fraction=v["val_fraction"],
    )
    xs, ys = load_examples(CorpusManifest.load(v["manifest"]), _features(v))
    report, model = train_arrays(config, xs, ys)
    out = Path(v["out"])
    report_path = Path(v["report"]) if v["report"] else out.with_suffix(".report.jsonl")
    size = save_model(model, out)
    report_path.write_text(report.to_jsonl())
    best = report.epochs[report.best_epoch - 1]
    print(
        json.dumps(
            {
                "model": str(out),
                "report": str(report_path),
                "bytes": size,
                "best_epoch": report.best_epoch,
                "val_acc": best["val_acc"],
            }
        )
    )
    return EXIT_OK


def cmd_quantize(v: dict) -> int:
    model = load_model(v["model"])
    xs, _ = load_examples(CorpusManifest.load(v["manifest"]), _features(v))
    qm = quantize_model(model, list(xs))
    size = save_model(qm, v["out"])
    print(json.dumps({"model": str(v["out"]), "bytes": size, "float_bytes": serialized_size(model)}))
    return EXIT_OK


def _classify_stdin(model, features: FeatureConfig, sink) -> int:
    config = StreamConfig()
    stream = ClassificationStream(model, config, features)
    block = 2 * config.window_hop_samples
    carry = b""
    n_events = 0
    src = sys.stdin.buffer
    while chunk := src.read(block):
        data = carry + chunk
        cut = len(data) - len(data) % 2
        carry = data[cut:]
        stream.push_samples(pcm16_to_float(data[:cut]))
        for ev in stream.drain():
            sink(ev)
            n_events += 1
    if stream.pushed_samples < config.window_len_samples:
        raise InvalidArgument("clip shorter than one window")
    return n_events


def cmd_classify(v: dict) -> int:
    if bool(v["wav"]) == bool(v["stdin_pcm"]):
        raise UsageError("roadnoise classify: give exactly one of --wav or --stdin-pcm")
    model = load_model(v["model"])
    features = _features(v)
    with_latency = not v["no_latency"]
    with open(v["events"], "w") as fh:

        def sink(ev) -> None:
            fh.write(ev.to_json(with_latency) + "\n")

        if v["wav"]:
            events, _ = classify_clip(model, read_wav(v["wav"]), features=features)
            for ev in events:
                sink(ev)
        else:
            _classify_stdin(model, features, sink)
    print(v["events"])
    return EXIT_OK


def cmd_gradcheck(v: dict) -> int:
    err = grad_check(v["arch"], seed=v["seed"])
    print(f"max_rel_err={err:.6e}")
    if not err < GRADCHECK_TOLERANCE:
        log.error("gradient check failed: %.3e >= %.0e", err, GRADCHECK_TOLERANCE)
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_bench(v: dict) -> int:
    model = load_model(v["model"])
    stats = bench(model, read_wav(v["wav"]), v["repetitions"], features=_features(v))
    out = dict(stats.__dict__)
    out["platform"] = f"{platform.system()} {platform.machine()} {platform.processor() or 'cpu'}".strip()
    out["numpy"] = np.__version__
    print(json.dumps(out))
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "features": cmd_features,
    "train": cmd_train,
    "quantize": cmd_quantize,
    "classify": cmd_classify,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        values = resolve_options(args)
        return HANDLERS[args.command](values)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_DOMAIN
    except RoadNoiseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
