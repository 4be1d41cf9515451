"""Command line entry point: train, evaluate, generate, chat, synth, inspect."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from . import diffcore as dc
from . import synth
from .archive import (
    ArchiveError,
    ModelArchive,
    format_modalities,
    format_settings,
    load_archive,
    model_config_from_settings,
    parse_modalities,
    parse_settings,
    save_archive,
)
from .data import (
    DataError,
    DatasetSplit,
    DialogExample,
    FeatureStore,
    FormatError,
    Round,
    SchemaError,
    Vocabulary,
    build_vocab,
    detokenize,
    load_dialogs,
    make_rounds,
    tokenize,
)
from .metrics import EvalPair, MetricReport, evaluate, write_report
from .model import DialogModel
from .training import TrainConfig, fit, prepare_corpus

log = logging.getLogger("avsd")

EXIT_CONFIG = 2
EXIT_DATA = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    embed_dim: int = 256
    enc_layers: int = 2
    enc_cells: int = 128
    dec_layers: int = 2
    dec_cells: int = 128
    proj_dim: int = 256
    att_dim: int = 128
    modalities: str = ""
    fusion: str = "attentional"
    use_captions: bool = False
    normalize_features: bool = False
    min_count: int = 2
    # training
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_lambda: float = 1e-5
    max_epochs: int = 20
    batch_size: int = 8
    optimizer: str = "adam"
    clip_norm: float = 5.0
    seed: int = 0
    # decoding
    beam: int = 5
    max_len: int = 30
    length_norm: bool = False
    # paths
    train: str = ""
    dev: str = ""
    test: str = ""
    features_dir: str = ""
    out: str = ""

    PATH_KEYS = ("train", "dev", "test", "features_dir", "out")

    @classmethod
    def from_settings(cls, settings: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        cfg = dataclasses.replace(base) if base is not None else cls()
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in settings.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, raw, types[key]))
        return cfg

    def settings(self, include_paths: bool = True) -> dict[str, str]:
        out = {}
        for f in fields(self):
            if not include_paths and f.name in self.PATH_KEYS:
                continue
            v = getattr(self, f.name)
            out[f.name] = ("true" if v else "false") if isinstance(v, bool) else str(v)
        return out

    @property
    def modality_list(self) -> tuple[tuple[str, int], ...]:
        try:
            return parse_modalities(self.modalities)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            l2_lambda=self.l2_lambda,
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            optimizer=self.optimizer,
            clip_norm=self.clip_norm or None,
        )


def _coerce(key: str, raw, typ):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in ("bool", bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def load_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_settings(p.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# loading helpers


def _store(cfg: RunConfig, modalities) -> FeatureStore:
    if modalities:
        root = Path(cfg.features_dir) if cfg.features_dir else None
        if root is None or not root.is_dir():
            names = ",".join(m for m, _ in modalities)
            raise DataError(f"features directory {cfg.features_dir!r} not found; needed for modalities {names}")
        for m, _ in modalities:
            if not (root / m).is_dir():
                raise DataError(f"no {m} features under {root}")
    return FeatureStore(cfg.features_dir or None, modalities, cfg.normalize_features)


def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"missing --{what}")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} file {p} does not exist")
    return p


@dataclass
class LoadedModel:
    archive: ModelArchive
    model: DialogModel
    cfg: RunConfig

    @property
    def vocab(self) -> Vocabulary:
        return self.archive.vocab

    @property
    def params(self):
        return self.archive.params


def open_model(path, overrides: dict[str, str]) -> LoadedModel:
    archive = load_archive(path)
    stored = RunConfig.from_settings(archive.settings)
    # decoding and path settings may be changed at load time, the architecture may not
    cfg = RunConfig.from_settings({k: v for k, v in overrides.items() if k in _RUNTIME_KEYS}, stored)
    return LoadedModel(archive, DialogModel(archive.model_config), cfg)


_RUNTIME_KEYS = {"beam", "max_len", "length_norm", "features_dir", "out", "test", "dev", "train", "seed"}


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, out_stream: TextIO = sys.stdout) -> Path:
    train_path = _require(cfg.train, "train")
    dev_path = _require(cfg.dev, "dev")
    if not cfg.out:
        raise ConfigError("missing --out")
    modalities = cfg.modality_list
    train_split = load_dialogs(train_path, "train")
    dev_split = load_dialogs(dev_path, "validation")
    store = _store(cfg, modalities)
    vocab = build_vocab(train_split.examples, cfg.min_count)
    train_corpus = prepare_corpus(train_split, vocab, store, cfg.use_captions)
    dev_corpus = prepare_corpus(dev_split, vocab, store, cfg.use_captions)

    archive_settings = cfg.settings(include_paths=False)
    archive_settings["modalities"] = format_modalities(modalities)
    model = DialogModel(model_config_from_settings(archive_settings, len(vocab)))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_settings(cfg.settings()), encoding="utf-8")
    rng = np.random.default_rng(cfg.seed)
    params = model.init_params(rng)
    log_path = out / "epochs.log"
    with log_path.open("w", encoding="utf-8") as fh:

        def on_epoch(rec):
            fh.write(rec.line() + "\n")
            fh.flush()
            print(rec.line(), file=out_stream)

        result = fit(model, train_corpus, dev_corpus, cfg.train_config(), params=params, rng=rng, on_epoch=on_epoch)
    archive_path = out / "model.mmdm"
    save_archive(archive_path, ModelArchive(vocab, archive_settings, result.params))
    print(f"best epoch {result.best_epoch} dev perplexity {result.best_perplexity:.6f}", file=out_stream)
    print(f"wrote {archive_path}", file=out_stream)
    return archive_path


@dataclass
class RoundResult:
    video_id: str
    round: int
    hypothesis: str
    reference: str
    beta: dict[str, float]

    def record(self) -> dict:
        return {
            "id": self.video_id,
            "round": self.round,
            "hypothesis": self.hypothesis,
            "reference": self.reference,
            "beta": self.beta,
        }


def decode_dialog(lm: LoadedModel, rounds: Sequence[Round], features) -> list[tuple[list[int], dict[str, float]]]:
    """Top beam hypothesis (without <eos>) and modality weights for each round."""
    out = []
    cfg = lm.cfg
    with dc.no_grad():
        contexts = lm.model.encode_rounds(lm.params, rounds, features)
        for ctx in contexts:
            hyp = lm.model.generate(lm.params, ctx, cfg.beam, cfg.max_len, cfg.length_norm)
            toks = hyp.tokens[:-1] if hyp.finished else hyp.tokens
            beta = {}
            if ctx.beta is not None:
                beta = {m: float(b) for m, b in zip(lm.model.config.modality_names, ctx.beta)}
            out.append((toks, beta))
    return out


def cmd_evaluate(
    lm: LoadedModel, split: DatasetSplit, oracle: bool = False, workers: int = 1
) -> tuple[list[RoundResult], MetricReport]:
    cfg = lm.cfg
    modalities = lm.model.config.modalities
    store = _store(cfg, modalities)

    def run(ex: DialogExample) -> list[RoundResult]:
        rounds = make_rounds(ex, lm.vocab, cfg.use_captions)
        refs = [a for _, a in ex.rounds]
        if oracle:
            return [RoundResult(ex.video_id, i, refs[i], refs[i], {}) for i in range(len(rounds))]
        decoded = decode_dialog(lm, rounds, store.load(ex.video_id))
        return [
            RoundResult(ex.video_id, i, detokenize(lm.vocab.decode(toks)), refs[i], beta)
            for i, (toks, beta) in enumerate(decoded)
        ]

    if modalities:  # fail fast and warm the cache before any worker starts
        for ex in split:
            store.load(ex.video_id)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_dialog = list(pool.map(run, split.examples))
    else:
        per_dialog = [run(ex) for ex in split]
    results = [r for rs in per_dialog for r in rs]
    pairs = [EvalPair.from_text(f"{r.video_id}#{r.round}", r.hypothesis, r.reference) for r in results]
    return results, evaluate(pairs)


def answer_question(
    lm: LoadedModel, history: Sequence[tuple[str, str]], question: str, features, caption: str | None = None
) -> tuple[str, dict[str, float]]:
    ex = DialogExample("session", list(history) + [(question, "x")], caption)
    rounds = make_rounds(ex, lm.vocab, lm.cfg.use_captions)
    (toks, beta), = decode_dialog(lm, rounds[-1:], features)
    return detokenize(lm.vocab.decode(toks)), beta


def cmd_generate(lm: LoadedModel, dialog: DialogExample, question: str, features) -> tuple[str, dict[str, float]]:
    if not tokenize(question):
        raise ConfigError("question is empty")
    return answer_question(lm, dialog.rounds, question, features, dialog.caption)


def format_beta(beta: dict[str, float]) -> str:
    return " ".join(f"{m}={v:.4f}" for m, v in beta.items())


def cmd_chat(lm: LoadedModel, features, stdin: TextIO, stdout: TextIO, caption: str | None = None) -> list[tuple[str, str]]:
    """Answer questions read line by line; earlier exchanges become the history."""
    history: list[tuple[str, str]] = []
    while True:
        stdout.write("Q: ")
        stdout.flush()
        line = stdin.readline()
        if not line:
            break
        line = line.strip()
        if line.lower() in ("exit", "quit"):
            break
        if not tokenize(line):
            stdout.write("(please type a question, or 'exit')\n")
            continue
        answer, beta = answer_question(lm, history[-9:], line, features, caption)
        stdout.write(f"A: {answer}\n")
        if beta:
            stdout.write(f"   modality weights: {format_beta(beta)}\n")
        history.append((line, answer))
    return history


def cmd_synth(out: Path, cfg: synth.SynthConfig) -> dict[str, Path]:
    return synth.write_corpus(out, cfg)


def cmd_inspect(archive: ModelArchive) -> dict:
    return {
        "vocab_size": len(archive.vocab),
        "settings": archive.settings,
        "num_parameters": archive.params.num_scalars(),
        "parameters": {name: list(t.shape) for name, t in archive.params.items()},
    }


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--features-dir")
    p.add_argument("--out")
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="avsd", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write model.mmdm + epochs.log")
    _common(p)
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--modalities", help="comma list, e.g. i3d_rgb,i3d_flow,vggish or name:dim")
    p.add_argument("--fusion", choices=("naive", "attentional"))
    p.add_argument("--use-captions", action="store_true", default=None)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("evaluate", help="decode a test set and score it")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--test")
    p.add_argument("--oracle", action="store_true", help="score references against themselves")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("generate", help="answer one question about one dialog")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dialog", required=True, help="dialog JSON file")
    p.add_argument("--video-id", help="dialog to use (default: first)")
    p.add_argument("--question", required=True)

    p = sub.add_parser("chat", help="interactive question answering about one video")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--video-id", required=True)
    p.add_argument("--caption")

    p = sub.add_parser("synth", help="write a planted synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-dialogs", type=int, default=20)
    p.add_argument("--dev-dialogs", type=int, default=5)
    p.add_argument("--test-dialogs", type=int, default=5)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--noise", type=float, default=synth.SynthConfig.noise)

    p = sub.add_parser("inspect", help="print archive metadata as JSON")
    p.add_argument("--model", required=True)
    return ap


_FLAG_KEYS = (
    "seed",
    "features_dir",
    "out",
    "beam",
    "max_len",
    "train",
    "dev",
    "test",
    "modalities",
    "fusion",
    "use_captions",
    "max_epochs",
    "learning_rate",
    "batch_size",
)


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    settings = load_config_file(args.config) if getattr(args, "config", None) else {}
    for key in _FLAG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            settings[key] = str(v).lower() if isinstance(v, bool) else str(v)
    return settings


def _features_for(lm: LoadedModel, video_id: str):
    return _store(lm.cfg, lm.model.config.modalities).load(video_id)


def main(argv: Sequence[str] | None = None, stdin: TextIO | None = None, stdout: TextIO | None = None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    try:
        if args.command == "synth":
            cfg = synth.SynthConfig(
                args.train_dialogs, args.dev_dialogs, args.test_dialogs, args.rounds, args.seed, noise=args.noise
            )
            paths = cmd_synth(Path(args.out), cfg)
            for k, v in paths.items():
                print(f"{k}: {v}", file=stdout)
            return 0
        if args.command == "inspect":
            print(json.dumps(cmd_inspect(load_archive(args.model)), indent=2), file=stdout)
            return 0
        overrides = _overrides(args)
        if args.command == "train":
            cmd_train(RunConfig.from_settings(overrides), stdout)
            return 0
        lm = open_model(args.model, overrides)
        if args.command == "evaluate":
            split = load_dialogs(_require(lm.cfg.test, "test"), "test")
            results, report = cmd_evaluate(lm, split, args.oracle, args.workers)
            if lm.cfg.out:
                out = Path(lm.cfg.out)
                out.mkdir(parents=True, exist_ok=True)
                with (out / "results.jsonl").open("w", encoding="utf-8") as fh:
                    for r in results:
                        fh.write(json.dumps(r.record(), ensure_ascii=False) + "\n")
                write_report(out / "metrics.json", report)
            for k, v in report.to_dict().items():
                print(f"{k} = {v:.6f}", file=stdout)
            return 0
        if args.command == "generate":
            split = load_dialogs(_require(args.dialog, "dialog"), "test")
            if args.video_id:
                dialog = split.by_id().get(args.video_id)
                if dialog is None:
                    raise DataError(f"video {args.video_id!r} not in {args.dialog}")
            else:
                dialog = split.examples[0]
            answer, _ = cmd_generate(lm, dialog, args.question, _features_for(lm, dialog.video_id))
            print(answer, file=stdout)
            return 0
        if args.command == "chat":
            cmd_chat(lm, _features_for(lm, args.video_id), stdin, stdout, args.caption)
            return 0
    except (ConfigError, ArchiveError, ValueError) as exc:
        if isinstance(exc, (SchemaError, FormatError)):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
