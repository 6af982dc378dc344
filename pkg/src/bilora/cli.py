"""Command-line entry point: ``python -m bilora <subcommand> [options]``.

Options may also come from ``--config file.json`` (keys are the long option
names with dashes replaced by underscores); flags given on the command line
win. Exit status: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .data import DEFAULT_COUNTS, DEFAULT_FAMILIES, gen_dataset, load_manifest
from .degrade import DEGRADE_NAMES, DegradeSpec
from .errors import BiloraError
from .evaluate import EvalReport, cross_matrix, degrade_label, eval_subset
from .lora import count_params
from .model import CaptionModel, ModelConfig
from .train import LoraConfig, TrainConfig, load_checkpoint, prepare_finetune, save_checkpoint, train

log = logging.getLogger("bilora")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class HelpShown(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _csv(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(t) for t in text]
    return [t.strip() for t in str(text).split(",") if t.strip()]


# Each option: (flag, type, default, help). Defaults live here, not in argparse,
# so we can tell which flags were given explicitly.
OPTIONS = {
    "gen-data": [
        ("--out", str, None, "output directory (required)"),
        ("--train", int, DEFAULT_COUNTS["train"], "train images per family"),
        ("--val", int, DEFAULT_COUNTS["val"], "val images per family"),
        ("--test", int, DEFAULT_COUNTS["test"], "test images per family"),
        ("--families", _csv, [f.name for f in DEFAULT_FAMILIES], "comma-separated built-in family names"),
    ],
    "pretrain": [
        ("--manifest", str, None, "manifest.jsonl (required)"),
        ("--out", str, None, "output checkpoint (required)"),
        ("--families", _csv, None, "train families (default: fam_a..fam_e)"),
        ("--epochs", int, 8, "training epochs"),
        ("--lr", float, 1e-3, "Adam learning rate"),
        ("--batch_size", int, 32, "minibatch size"),
        ("--concept_images", int, 800, "extra images with random artifacts captioned 'fake'"),
        ("--early_stop", bool, False, "stop at the first epoch with perfect val accuracy"),
    ],
    "finetune": [
        ("--base", str, None, "pretrained base checkpoint (required)"),
        ("--manifest", str, None, "manifest.jsonl (required)"),
        ("--out", str, None, "output checkpoint (required)"),
        ("--families", _csv, None, "fake families to train on (required)"),
        ("--epochs", int, 20, "maximum epochs"),
        ("--lr", float, 1e-3, "Adam learning rate"),
        ("--batch_size", int, 32, "minibatch size"),
        ("--rank", int, 16, "LoRA rank r"),
        ("--alpha", float, 32.0, "LoRA scaling numerator"),
        ("--dropout", float, 0.05, "dropout on the adapter input"),
        ("--targets", _csv, ["query", "key"], "decoder projections to adapt"),
        ("--early_stop", bool, True, "stop at the first epoch with perfect val accuracy"),
    ],
    "eval": [
        ("--ckpt", str, None, "checkpoint (required)"),
        ("--manifest", str, None, "manifest.jsonl (required)"),
        ("--family", str, None, "test family (required)"),
        ("--degrade", str, "none", f"one of {'|'.join(DEGRADE_NAMES)}"),
        ("--degrade_param", float, None, "override the degradation strength"),
        ("--out", str, None, "write JSON here instead of standard output"),
    ],
    "matrix": [
        ("--ckpts", _csv, None, "comma-separated family=checkpoint pairs (required)"),
        ("--manifest", str, None, "manifest.jsonl (required)"),
        ("--degrade", _csv, ["none"], "comma-separated degradations"),
        ("--degrade_param", float, None, "override the strength of every non-none degradation"),
        ("--test_families", _csv, None, "restrict test families (default: all in manifest)"),
        ("--out", str, None, "CSV path (default: standard output)"),
        ("--markdown", str, None, "also write a Markdown table here"),
        ("--json", str, None, "also write the full report as JSON here"),
    ],
    "report": [
        ("--input", str, None, "report JSON written by 'matrix --json' (required)"),
        ("--out", str, None, "Markdown path (default: standard output)"),
    ],
}
SUMMARIES = {
    "gen-data": "write the synthetic corpus and its manifest",
    "pretrain": "train a base captioner from scratch",
    "finetune": "train LoRA adapters on a frozen base",
    "eval": "ACC/F1 of one checkpoint on one test family",
    "matrix": "train x test x degradation grid as CSV/Markdown",
    "report": "render a stored report as Markdown",
}
REQUIRED = {
    "gen-data": ["out"], "pretrain": ["manifest", "out"], "finetune": ["base", "manifest", "out", "families"],
    "eval": ["ckpt", "manifest", "family"], "matrix": ["ckpts", "manifest"], "report": ["input"],
}


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global RNG seed (default 0)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file with option values")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = _Parser(prog="bilora", description="Caption-based real/fake detection with LoRA adapters.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    for name, opts in OPTIONS.items():
        sp = sub.add_parser(name, parents=[common], argument_default=argparse.SUPPRESS,
                            help=SUMMARIES[name], description=SUMMARIES[name])
        for flag, typ, default, text in opts:
            conv = _bool if typ is bool else typ
            names = dict.fromkeys([flag.replace("_", "-"), flag])
            shown = ",".join(default) if isinstance(default, (list, tuple)) else default
            sp.add_argument(*names, dest=flag[2:], type=conv,
                            help=f"{text} [default: {shown}]" if default is not None else text)
    return parser


def resolve(argv) -> tuple[str, dict]:
    """Parse ``argv`` and merge defaults, config file and explicit flags."""
    parser = build_parser()
    if not argv:
        raise UsageError(parser.format_help())
    try:
        ns = vars(parser.parse_args(argv))
    except SystemExit as exc:  # --help
        raise HelpShown() from exc
    command = ns.pop("command", None)
    if command is None:
        raise UsageError(parser.format_help())
    opts = {flag[2:]: default for flag, _, default, _ in OPTIONS[command]}
    opts["seed"] = 0
    opts["verbose"] = False
    if "config" in ns:
        path = ns.pop("config")
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        unknown = sorted(set(loaded) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {unknown}")
        types = {flag[2:]: typ for flag, typ, _, _ in OPTIONS[command]}
        for k, v in loaded.items():
            typ = types.get(k)
            try:
                opts[k] = v if v is None or typ is None else (_bool(v) if typ is bool else typ(v))
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {k}: {exc}") from exc
    opts.update(ns)
    missing = [k for k in REQUIRED[command] if not opts.get(k)]
    if missing:
        raise UsageError(f"{command}: missing required option(s) " + ", ".join("--" + m for m in missing))
    return command, opts


def _check_threads():
    env = os.environ.get("BILORA_THREADS")
    if env is not None and (not env.isdigit() or int(env) < 1):
        raise UsageError(f"BILORA_THREADS must be a positive integer, got {env!r}")


def _new_output(path, inputs=()) -> Path:
    out = Path(path)
    for src in inputs:
        if src and Path(src).resolve() == out.resolve():
            raise UsageError(f"output {out} would overwrite input {src}")
    return out


def _degrade_specs(names, param) -> list[DegradeSpec]:
    specs = []
    for name in names:
        if name not in DEGRADE_NAMES:
            raise UsageError(f"unknown degradation {name!r}; choose from {'|'.join(DEGRADE_NAMES)}")
        specs.append(DegradeSpec.from_name(name, None if name == "none" else param))
    return specs


def _emit(text: str, path) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# ------------------------------------------------------------------ commands
# Each ``plan_*`` validates everything and returns a zero-argument job; the
# job is the only place with side effects.


def plan_gen_data(o):
    known = {f.name: f for f in DEFAULT_FAMILIES}
    bad = [f for f in o["families"] if f not in known]
    if bad:
        raise UsageError(f"unknown families {bad}; built-in: {sorted(known)}")
    counts = {"train": o["train"], "val": o["val"], "test": o["test"]}
    if min(counts.values()) <= 0:
        raise UsageError(f"counts must be positive, got {counts}")
    specs = [known[f] for f in o["families"]]
    out = _new_output(o["out"])

    def job():
        m = gen_dataset(out, specs, counts, seed=o["seed"])
        print(f"wrote {len(m.records)} records to {out / 'manifest.jsonl'}", file=sys.stderr)
    return job


def plan_pretrain(o):
    cfg = TrainConfig(stage="pretrain", learning_rate=o["lr"], epochs=o["epochs"], batch_size=o["batch_size"],
                      seed=o["seed"], concept_images=o["concept_images"], early_stop=o["early_stop"],
                      families=tuple(o["families"] or [f.name for f in DEFAULT_FAMILIES[:5]]))
    out = _new_output(o["out"], [o["manifest"]])

    def job():
        manifest = load_manifest(o["manifest"])
        ck = train(CaptionModel(ModelConfig(seed=o["seed"])), manifest, cfg)
        save_checkpoint(ck, out)
        print(f"base checkpoint -> {out} (best epoch {ck.extra['best_epoch']})", file=sys.stderr)
    return job


def plan_finetune(o):
    lora = LoraConfig(r=o["rank"], alpha=o["alpha"], dropout=o["dropout"], targets=tuple(o["targets"]))
    cfg = TrainConfig(stage="finetune", learning_rate=o["lr"], epochs=o["epochs"], batch_size=o["batch_size"],
                      seed=o["seed"], lora=lora, families=tuple(o["families"]), early_stop=o["early_stop"])
    out = _new_output(o["out"], [o["base"], o["manifest"]])

    def job():
        manifest = load_manifest(o["manifest"])
        model = prepare_finetune(load_checkpoint(o["base"]), cfg)
        ck = train(model, manifest, cfg)
        save_checkpoint(ck, out)
        mc = model.config
        budget = count_params(mc.decoder_layers, mc.d_model, len(cfg.lora.targets), cfg.lora.r,
                              frozen_total=sum(t.data.size for t in model.params.values()))
        print(f"adapter checkpoint -> {out}; trainable {budget.trainable} "
              f"({budget.percent:.2f}% of {budget.frozen + budget.trainable})", file=sys.stderr)
    return job


def plan_eval(o):
    (spec,) = _degrade_specs([o["degrade"]], o["degrade_param"])
    out = None if o["out"] is None else _new_output(o["out"], [o["ckpt"], o["manifest"]])

    def job():
        res = eval_subset(load_checkpoint(o["ckpt"]), load_manifest(o["manifest"]), o["family"], spec)
        c = res.confusion
        payload = {"test_family": res.test_family, "degrade": res.degrade, "n": res.n, "acc": res.acc,
                   "f1": res.f1, "confusion": {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn}}
        _emit(json.dumps(payload, indent=2, sort_keys=True) + "\n", out)
    return job


def plan_matrix(o):
    ckpts = {}
    for item in o["ckpts"]:
        fam, sep, path = item.partition("=")
        if not sep or not fam or not path:
            raise UsageError(f"--ckpts entries look like family=path, got {item!r}")
        if fam in ckpts:
            raise UsageError(f"family {fam} given twice in --ckpts")
        ckpts[fam] = path
    specs = _degrade_specs(o["degrade"], o["degrade_param"])
    inputs = [o["manifest"], *ckpts.values()]
    outs = {k: None if o[k] is None else _new_output(o[k], inputs) for k in ("out", "markdown", "json")}

    def job():
        manifest = load_manifest(o["manifest"])
        models = {fam: load_checkpoint(p).to_model() for fam, p in ckpts.items()}
        report = cross_matrix(models, manifest, specs, o["test_families"])
        report.metadata["checkpoints"] = dict(ckpts)
        _emit(report.to_csv(), outs["out"])
        if outs["markdown"] is not None:
            outs["markdown"].write_text(report.to_markdown(), encoding="utf-8")
        if outs["json"] is not None:
            outs["json"].write_text(report.to_json(), encoding="utf-8")
        print(f"{len(report.rows)} rows over degradations {[degrade_label(s) for s in specs]}", file=sys.stderr)
    return job


def plan_report(o):
    out = None if o["out"] is None else _new_output(o["out"], [o["input"]])

    def job():
        try:
            report = EvalReport.from_json(Path(o["input"]).read_text(encoding="utf-8"))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise BiloraError(f"{o['input']} is not a stored report: {exc}") from exc
        _emit(report.to_markdown(), out)
    return job


PLANS = {"gen-data": plan_gen_data, "pretrain": plan_pretrain, "finetune": plan_finetune,
         "eval": plan_eval, "matrix": plan_matrix, "report": plan_report}


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, opts = resolve(argv)
        _check_threads()
        logging.basicConfig(level=logging.INFO if opts["verbose"] else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        job = PLANS[command](opts)
    except HelpShown:
        return EXIT_OK
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (BiloraError, ValueError) as exc:
        print(f"bilora: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        job()
    except (BiloraError, OSError, ValueError, ArithmeticError, KeyError) as exc:
        print(f"bilora {command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
