"""Command-line pipeline: data, decoder, adversary, attacks, hardening, comparison.

Every option has a built-in default, may be set in an INI config file
(``--config`` or ``$QECREDTEAM_CONFIG``) and may be overridden by a flag.
Each stage draws its seed from ``hash(master seed, stage name)`` and writes a
``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .adversary import ActorConfig, ActorModel, Environment, attack_eval, brute_force_attack, reinforce_train
from .codesim import NoiseModel, bayes_accuracy, generate, import_01, positive_rate, read_dataset, write_dataset
from .decoder import DecoderConfig, DecoderModel, evaluate, train
from .errors import ConfigError, RedTeamError
from .hardening import generate_adversarial, robust_train
from .report import compare_reports, emit_curves, emit_heatmap, load_report, save_report, write_json

CONFIG_ENV = "QECREDTEAM_CONFIG"


def _opt(section: str, default, help: str):
    return field(default=default, metadata={"section": section, "help": help})


@dataclass
class RunConfig:
    seed: int = _opt("run", 0, "master seed; each stage derives its own")
    workers: int = _opt("run", 1, "threads for evaluation stages (training ignores it)")
    mode: str = _opt("data", "rep-code", "rep-code or teacher")
    n: int = _opt("data", 10_000, "number of records to generate")
    p: float = _opt("data", 0.05, "per-round data-flip probability")
    q: float = _opt("data", 0.05, "measurement-flip probability")
    teacher_seed: int = _opt("data", 0, "seed of the teacher network (teacher mode)")
    n_s: int = _opt("data", 4, "spatial detectors")
    t: int = _opt("data", 2, "rounds")
    layout: str = _opt("data", "star", "stabilizer layout: star or chain")
    split_seed: int = _opt("data", 0, "seed of the 80/20 train/test hash split")
    hidden_dim: int = _opt("decoder", 32, "GAT width")
    heads: int = _opt("decoder", 1, "attention heads (only 1 is supported)")
    mlp_hidden: int = _opt("decoder", 32, "classifier hidden width")
    lr: float = _opt("decoder", 1e-3, "decoder learning rate")
    epochs: int = _opt("decoder", 20, "decoder training epochs")
    batch: int = _opt("decoder", 64, "mini-batch size")
    episodes: int = _opt("adversary", 4000, "REINFORCE episodes")
    gamma: float = _opt("adversary", 0.95, "discount factor")
    max_steps: int = _opt("adversary", 5, "flip budget M per episode")
    actor_lr: float = _opt("adversary", 1e-3, "actor learning rate")
    actor_hidden: int = _opt("adversary", 32, "actor GAT width")
    feature_skip: bool = _opt("adversary", False, "feed each node's own bits to the policy head")
    oracle_k: int = _opt("adversary", 5, "exhaustive attack flip budget")
    oracle_budget: int = _opt("adversary", 100_000, "max flip subsets per sample for the exhaustive attack")
    alpha: float = _opt("hardening", 1.0, "weight of the adversarial loss")
    harden_epochs: int = _opt("hardening", 10, "retraining epochs")
    fresh_init: bool = _opt("hardening", False, "retrain from fresh weights instead of the baseline")

    def noise_model(self) -> NoiseModel:
        return NoiseModel(self.mode, self.p, self.q, self.teacher_seed, self.n_s, self.t, self.layout)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            in_dim=self.t,
            hidden_dim=self.hidden_dim,
            heads=self.heads,
            mlp_hidden=self.mlp_hidden,
            lr=self.lr,
            epochs=self.epochs,
            batch=self.batch,
        )


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
SECTIONS = {
    "gen-data": ("data",),
    "import-01": (),
    "bayes": ("data",),
    "train-decoder": ("decoder",),
    "train-adversary": ("adversary",),
    "attack": ("adversary",),
    "oracle-attack": ("adversary",),
    "harden": ("hardening", "adversary"),
    "compare": (),
}


def flag_name(name: str) -> str:
    return "--" + name.replace("_", "-")


def _convert(name: str, raw):
    kind = FIELDS[name].type
    if kind in (bool, "bool"):
        if isinstance(raw, bool):
            return raw
        value = str(raw).strip().lower()
        if value in ("1", "true", "yes", "on"):
            return True
        if value in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    cast = {"int": int, "float": float, "str": str}.get(kind, kind)
    try:
        return cast(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot read {raw!r} as {cast.__name__}") from None


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``{field: raw string}`` from an INI file; keys may use - or _."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except configparser.Error as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            name = key.replace("-", "_")
            if name not in FIELDS:
                raise ConfigError(f"config file {path}: unknown key {key!r} in [{section}]")
            if FIELDS[name].metadata["section"] != section:
                raise ConfigError(f"config file {path}: {key!r} belongs in [{FIELDS[name].metadata['section']}]")
            values[name] = raw
    return values


def resolve_config(flags: dict, config_path: str | None) -> RunConfig:
    """Flag > config file > built-in default, field by field."""
    path = config_path or os.environ.get(CONFIG_ENV)
    from_file = read_config_file(path) if path else {}
    values = {}
    for name in FIELDS:
        if flags.get(name) is not None:
            values[name] = _convert(name, flags[name])
        elif name in from_file:
            values[name] = _convert(name, from_file[name])
    return RunConfig(**values)


def stage_seed(master: int, stage: str) -> int:
    digest = hashlib.blake2b(f"{master}:{stage}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, seed: int, inputs: dict[str, Path], argv: list[str]) -> None:
    outputs = sorted(p for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    write_json(
        {
            "tool": "qecredteam",
            "version": __version__,
            "command": command,
            "argv": argv,
            "config": dataclasses.asdict(cfg),
            "master_seed": cfg.seed,
            "stage_seed": seed,
            "inputs": {role: {"path": str(p), "sha256": sha256_file(p)} for role, p in sorted(inputs.items())},
            "outputs": {p.name: sha256_file(p) for p in outputs},
        },
        out / "manifest.json",
    )


# ---------------------------------------------------------------------------
# stages


def _test_pool(env: Environment, ds):
    _, test = ds.split()
    return test.bits[env.negative_pool(test)]


def cmd_gen_data(args, cfg, seed, out):
    ds = generate(cfg.noise_model(), cfg.n, seed, split_seed=cfg.split_seed)
    write_dataset(ds, out / "dataset.synd")
    print(f"{len(ds)} records, {ds.n_pos} positive -> {out / 'dataset.synd'}")
    return {}


def cmd_import_01(args, cfg, seed, out):
    order = None
    if args.detector_order:
        try:
            order = [int(v) for v in args.detector_order.split(",")]
        except ValueError:
            raise ConfigError(f"--detector-order must be comma-separated integers, got {args.detector_order!r}") from None
    ds = import_01(args.dets, args.obs, cfg.n_s, cfg.t, order)
    ds = dataclasses.replace(ds, split_seed=cfg.split_seed)
    write_dataset(ds, out / "dataset.synd")
    print(f"imported {len(ds)} records -> {out / 'dataset.synd'}")
    return {"dets": Path(args.dets), "obs": Path(args.obs)}


def cmd_bayes(args, cfg, seed, out):
    ds = read_dataset(args.data)
    model = cfg.noise_model()
    _, test = ds.split()
    summary = {
        "bayes_accuracy_test": bayes_accuracy(model, test),
        "bayes_accuracy_all": bayes_accuracy(model, ds),
        "positive_rate": positive_rate(model),
    }
    write_json(summary, out / "bayes.json")
    print(f"Bayes accuracy on test split: {summary['bayes_accuracy_test']:.4f}")
    return {"data": Path(args.data)}


def cmd_train_decoder(args, cfg, seed, out):
    ds = read_dataset(args.data)
    model, rows = train(ds, cfg.decoder_config(), seed)
    _, test = ds.split()
    metrics = evaluate(model, test)
    model.save(out / "decoder.json", provenance={"data": str(args.data), "data_sha256": sha256_file(args.data)})
    emit_curves(rows, out / "curves.csv")
    write_json(metrics.as_dict(), out / "metrics.json")
    print(f"test accuracy {metrics.accuracy:.4f} -> {out / 'decoder.json'}")
    return {"data": Path(args.data)}


def cmd_train_adversary(args, cfg, seed, out):
    decoder = DecoderModel.load(args.decoder)
    ds = read_dataset(args.data)
    env = Environment(decoder, ds.n_s, ds.t, cfg.max_steps)
    train_split, _ = ds.split()
    pool = train_split.bits[env.negative_pool(train_split)]
    config = ActorConfig(ds.t, cfg.actor_hidden, cfg.feature_skip)
    actor, history = reinforce_train(env, pool, cfg.episodes, cfg.gamma, cfg.actor_lr, seed, config=config)
    actor.save(out / "actor.json", provenance={"decoder": str(args.decoder), "decoder_sha256": sha256_file(args.decoder)})
    with open(out / "episodes.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("episode", "return", "success", "flips"))
        for i, (g, ok, flips) in enumerate(zip(history.returns, history.successes, history.flips), start=1):
            writer.writerow((i, repr(g), int(ok), flips))
    tail = history.successes[-500:]
    print(f"sampled success rate over last {len(tail)} episodes: {sum(tail) / len(tail):.3f}")
    return {"decoder": Path(args.decoder), "data": Path(args.data)}


def _emit_report(report, out: Path, title: str) -> None:
    save_report(report, out / "report.json")
    emit_heatmap(report, out / "heatmap.csv", out / "heatmap.svg", title=title)
    flips = "n/a" if report.avg_flips is None else f"{report.avg_flips:.3f}"
    print(f"ASR {report.asr:.4f} ({report.successes}/{report.pool_size}), avg flips {flips}")


def cmd_attack(args, cfg, seed, out):
    decoder = DecoderModel.load(args.decoder)
    actor = ActorModel.load(args.actor)
    ds = read_dataset(args.data)
    env = Environment(decoder, ds.n_s, ds.t, cfg.max_steps)
    report = attack_eval(env, actor, _test_pool(env, ds), cfg.workers)
    _emit_report(report, out, "Greedy RL attack")
    return {"decoder": Path(args.decoder), "actor": Path(args.actor), "data": Path(args.data)}


def cmd_oracle_attack(args, cfg, seed, out):
    decoder = DecoderModel.load(args.decoder)
    ds = read_dataset(args.data)
    env = Environment(decoder, ds.n_s, ds.t, cfg.max_steps)
    result = brute_force_attack(env, _test_pool(env, ds), cfg.oracle_k, cfg.oracle_budget, cfg.workers)
    _emit_report(result.report, out, f"Exhaustive attack, k={cfg.oracle_k}")
    return {"decoder": Path(args.decoder), "data": Path(args.data)}


def cmd_harden(args, cfg, seed, out):
    decoder = DecoderModel.load(args.decoder)
    actor = ActorModel.load(args.actor)
    ds = read_dataset(args.data)
    env = Environment(decoder, ds.n_s, ds.t, cfg.max_steps)
    train_split, test = ds.split()
    adv = generate_adversarial(actor, env, train_split, cfg.workers)
    hardened, rows = robust_train(decoder, ds, adv, cfg.alpha, cfg.harden_epochs, seed, cfg.fresh_init)
    hardened.save(
        out / "decoder.json",
        provenance={
            "hardened_from": str(args.decoder),
            "hardened_from_sha256": sha256_file(args.decoder),
            "actor": str(args.actor),
            "actor_sha256": sha256_file(args.actor),
            "adversarial_examples": len(adv),
        },
    )
    write_dataset(adv.as_dataset(), out / "adversarial.synd")
    emit_curves(rows, out / "curves.csv")
    before, after = evaluate(decoder, test), evaluate(hardened, test)
    write_json(
        {"adversarial_examples": len(adv), "accuracy_before": before.accuracy, "accuracy_after": after.accuracy},
        out / "metrics.json",
    )
    print(f"{len(adv)} adversarial examples; clean accuracy {before.accuracy:.4f} -> {after.accuracy:.4f}")
    return {"decoder": Path(args.decoder), "actor": Path(args.actor), "data": Path(args.data)}


def cmd_compare(args, cfg, seed, out):
    summary = compare_reports(load_report(args.before), load_report(args.after))
    write_json(summary, out / "comparison.json")
    ratio = "n/a" if summary["ratio"] is None else f"{summary['ratio']:.4f}"
    print(f"ASR {summary['asr_before']:.4f} -> {summary['asr_after']:.4f} (ratio {ratio})")
    return {"before": Path(args.before), "after": Path(args.after)}


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic syndrome dataset", []),
    "import-01": (cmd_import_01, "import paired 01-format detection/observable files", ["dets", "obs"]),
    "bayes": (cmd_bayes, "exact Bayes-optimal accuracy of a dataset", ["data"]),
    "train-decoder": (cmd_train_decoder, "train the GATv2 decoder", ["data"]),
    "train-adversary": (cmd_train_adversary, "train the REINFORCE bit-flip actor", ["decoder", "data"]),
    "attack": (cmd_attack, "greedy RL attack on the test split", ["decoder", "actor", "data"]),
    "oracle-attack": (cmd_oracle_attack, "exhaustive minimal-flip attack on the test split", ["decoder", "data"]),
    "harden": (cmd_harden, "adversarially retrain a decoder", ["decoder", "actor", "data"]),
    "compare": (cmd_compare, "compare two attack reports", ["before", "after"]),
}


def _add_field(parser: argparse.ArgumentParser, name: str) -> None:
    f = FIELDS[name]
    help_text = f"{f.metadata['help']} (default {f.default})"
    if f.type in (bool, "bool"):
        parser.add_argument(flag_name(name), dest=name, action=argparse.BooleanOptionalAction, default=None, help=help_text)
    else:
        parser.add_argument(flag_name(name), dest=name, default=None, metavar=name.upper(), help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qecredteam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text, required) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help=f"INI config file (default ${CONFIG_ENV})")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        for role in required:
            p.add_argument(f"--{role}", required=True, help=f"{role} file")
        if name == "import-01":
            p.add_argument("--detector-order", default=None, help="comma-separated detector -> bit permutation")
        for field_name, f in FIELDS.items():
            section = f.metadata["section"]
            wanted = section == "run" or section in SECTIONS[name]
            if name == "import-01" and field_name in ("n_s", "t", "split_seed"):
                wanted = True
            if wanted:
                _add_field(p, field_name)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    handler, _, _ = COMMANDS[args.command]
    try:
        cfg = resolve_config(vars(args), args.config)
        seed = stage_seed(cfg.seed, args.command)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs = handler(args, cfg, seed, out)
        write_manifest(out, args.command, cfg, seed, inputs, argv)
    except RedTeamError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    return 0
