"""Command-line entry point.

Every command writes ``summary.json`` (sorted keys, no timestamps) under
``--out``. Exit codes: 2 missing input file, 3 malformed configuration,
4 non-finite loss, 5 violated invariant.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .analysis import escape, inspection_dump, selection_frequency_stats
from .checkpoint import CheckpointError, load_model, save_model, save_nuggets
from .compressor import CompressorBundle, new_bundle, reconstruct_all, split_continuation, train_compressor
from .config import ConfigError, ModelConfig
from .data import Vocab, build_vocab, decode_utf8, read_pairs, word_lengths
from .metrics import corpus_bleu
from .model import PositionError, SequenceLengthError
from .optim import DivergenceError, TrainSettings
from .oracle import oracle_report
from .scorer import feature_input, score_features
from .selection import CalibrationError, EmptyInputError, nugget_compress, select_threshold, select_topk, threshold_for_ratio
from .streaming import DodoLM, budget_table, evaluate_lm, new_lm, recalibrate, train_lm

EXIT_MISSING, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INVARIANT = 2, 3, 4, 5
COMMANDS = ("train-compressor", "train-lm", "eval-lm", "eval-autoencode", "compress", "inspect-scores", "oracle", "calibrate-threshold")


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunOptions:
    """Run settings outside the model architecture."""

    steps: int = 2000
    lr: float = 3e-4
    warmup: int = 200
    batch_size: int = 16
    clip: float = 1.0
    seed: int = 0
    scheme: str = "char"
    task: str = "autoencode"
    kind: str = "dodo"
    mode: str = "topk"
    max_len: int = 64
    pool: int = 0
    budget: int = 0
    init_from: str = ""
    max_docs: int = 0
    exhaustive_limit: int = 2000
    eval_from: int = 0
    recalibrate_every: int = 0
    holdout: float = 0.5


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_RUN_KEYS = {f.name: f.type for f in fields(RunOptions)}


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"config line {n}: expected key=value", EXIT_CONFIG)
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise CLIError(f"config line {n}: empty key", EXIT_CONFIG)
        out[k] = v
    return out


def _coerce(key: str, value, kind) -> object:
    try:
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
        return str(value)
    except ValueError:
        raise CLIError(f"config key {key!r}: cannot parse {value!r}", EXIT_CONFIG) from None


def resolve(args: argparse.Namespace):
    """Merge config file and command-line flags (flags win) into (model overrides, RunOptions)."""
    raw = {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise CLIError(f"config file not found: {p}", EXIT_MISSING)
        raw.update(parse_config_text(p.read_text(encoding="utf-8")))
    flag_map = {"seed": args.seed, "ratio": args.ratio, "tau": args.tau, "threshold": args.threshold,
                "segment": args.segment, "steps": args.steps, "mode": args.mode}
    raw.update({k: v for k, v in flag_map.items() if v is not None})
    unknown = set(raw) - _MODEL_KEYS - set(_RUN_KEYS)
    if unknown:
        raise CLIError(f"unknown config keys: {sorted(unknown)}", EXIT_CONFIG)
    model = {k: v for k, v in raw.items() if k in _MODEL_KEYS}
    run = RunOptions(**{k: _coerce(k, v, _RUN_KEYS[k]) for k, v in raw.items() if k in _RUN_KEYS})
    if run.scheme not in ("char", "whitespace"):
        raise CLIError(f"unknown scheme {run.scheme!r}", EXIT_CONFIG)
    if run.mode not in ("topk", "threshold", "calibrate"):
        raise CLIError(f"unknown mode {run.mode!r}", EXIT_CONFIG)
    return model, run


def _model_config(overrides: dict, base: Optional[ModelConfig] = None, **defaults) -> ModelConfig:
    d = base.to_dict() if base is not None else ModelConfig().to_dict()
    d.update(defaults)
    d.update(overrides)
    try:
        return ModelConfig.from_dict(d)
    except (ConfigError, ValueError, TypeError) as e:
        raise CLIError(f"bad model config: {e}", EXIT_CONFIG) from None


def _read_corpus(path: Optional[str]) -> str:
    if not path:
        raise CLIError("--corpus is required", EXIT_CONFIG)
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"corpus not found: {p}", EXIT_MISSING)
    return decode_utf8(p.read_bytes())


def _docs(text: str) -> List[str]:
    return [line for line in text.split("\n") if line.strip()]


def _load(path: Optional[str]):
    if not path:
        raise CLIError("--checkpoint is required", EXIT_CONFIG)
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"checkpoint not found: {p}", EXIT_MISSING)
    vp = vocab_path(p)
    if not vp.is_file():
        raise CLIError(f"vocabulary not found: {vp}", EXIT_MISSING)
    try:
        return load_model(p), Vocab.load(vp)
    except CheckpointError as e:
        raise CLIError(str(e), EXIT_CONFIG) from None


def vocab_path(ckpt: Path) -> Path:
    return Path(str(ckpt) + ".vocab.json")


def _save(path: Path, model, vocab: Vocab):
    save_model(path, model)
    vocab.save(vocab_path(path))


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_summary(out: Path, summary: dict):
    text = json.dumps(summary, sort_keys=True, indent=2, allow_nan=True)
    (out / "summary.json").write_text(text + "\n", encoding="utf-8")


def _limit(items: list, run: RunOptions) -> list:
    return items[: run.max_docs] if run.max_docs else items


def _settings(run: RunOptions) -> TrainSettings:
    return TrainSettings(steps=run.steps, lr=run.lr, warmup=min(run.warmup, max(1, run.steps)), batch_size=run.batch_size,
                         clip=run.clip, seed=run.seed)


def cmd_train_compressor(args, overrides, run: RunOptions) -> dict:
    text = _read_corpus(args.corpus)
    out = _out(args)
    if run.task == "pairs":
        raw_pairs = read_pairs(text)
        vocab = build_vocab([t for pair in raw_pairs for t in pair], run.scheme)
        pairs = [(vocab.encode(a)[: run.max_len], vocab.encode(b)[: run.max_len]) for a, b in raw_pairs]
    else:
        docs = _docs(text)
        vocab = build_vocab(docs, run.scheme)
        enc = [vocab.encode(d)[: run.max_len] for d in docs]
        if run.task == "autoencode":
            pairs = [(d, d) for d in enc if d.size >= 2]
        elif run.task == "continuation":
            pairs = [split_continuation(d) for d in enc if d.size >= 2]
        else:
            raise CLIError(f"unknown task {run.task!r}", EXIT_CONFIG)
    pairs = [(w, y) for w, y in pairs if w.size >= 1 and y.size >= 1]
    if not pairs:
        raise CLIError("corpus holds no usable documents", EXIT_INVARIANT)
    need = max(len(w) + len(y) for w, y in pairs)
    cfg = _model_config(overrides, vocab_size=len(vocab), max_pos=max(need, ModelConfig().max_pos))
    bundle = new_bundle(cfg, seed=run.seed)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "compressor.ckpt"
    epochs = []

    def on_epoch(e, b):
        _save(ckpt, b, vocab)
        epochs.append(e)

    hist = train_compressor(bundle, pairs, _settings(run), on_epoch=on_epoch)
    tail = hist[-min(50, len(hist)):]
    return {"command": "train-compressor", "checkpoint": str(ckpt), "pairs": len(pairs), "steps": len(hist),
            "first_loss": hist[0], "final_loss": hist[-1], "final_loss_mean50": float(np.mean(tail)),
            "epochs_saved": len(epochs), "config": cfg.to_dict(), "task": run.task}


def _equal_length_docs(texts: List[str], vocab: Vocab, n: int) -> np.ndarray:
    enc = [vocab.encode(t) for t in texts]
    keep = [e[:n] for e in enc if e.size >= n]
    if not keep:
        raise CLIError(f"no document has at least max_len={n} tokens", EXIT_INVARIANT)
    return np.stack(keep)


def cmd_train_lm(args, overrides, run: RunOptions) -> dict:
    text = _read_corpus(args.corpus)
    out = _out(args)
    texts = _docs(text)
    init = None
    if run.init_from:
        init, vocab = _load(run.init_from)
        if not isinstance(init, CompressorBundle):
            raise CLIError("init_from must be a compressor checkpoint", EXIT_CONFIG)
        cfg = _model_config(overrides, base=init.config)
    else:
        vocab = build_vocab(texts, run.scheme)
        cfg = _model_config(overrides, vocab_size=len(vocab))
    docs = _equal_length_docs(texts, vocab, run.max_len)
    kw = {"pool": run.pool or max(1, int(round(cfg.ratio))), "budget": run.budget or cfg.tau + 1}
    model = new_lm(cfg, run.kind, seed=run.seed, **kw)
    if init is not None:
        model.decoder = init.decoder.clone("decoder")
        if run.kind == "dodo":
            model.encoder = init.encoder.clone("encoder")
            model.scorer = init.scorer.clone("scorer")
            model.features = init.features.clone("features", trainable=False)
    if run.kind == "dodo" and run.mode == "calibrate":
        recalibrate(model, docs, cfg.ratio)
    hist = train_lm(model, docs, _settings(run), recalibrate_every=run.recalibrate_every if run.mode == "calibrate" else 0)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / f"lm_{run.kind}.ckpt"
    _save(ckpt, model, vocab)
    return {"command": "train-lm", "checkpoint": str(ckpt), "kind": run.kind, "docs": int(len(docs)), "steps": len(hist),
            "first_loss": hist[0], "final_loss": hist[-1], "final_loss_mean50": float(np.mean(hist[-50:])),
            "threshold": model.config.threshold, "config": model.config.to_dict()}


def _word_fn(vocab: Vocab):
    if vocab.scheme == "char":
        return lambda ids: word_lengths("".join(vocab.token_text(i) if len(vocab.token_text(i)) == 1 else "?" for i in ids))
    return None


def cmd_eval_lm(args, overrides, run: RunOptions) -> dict:
    if not args.checkpoint:
        raise CLIError("--checkpoint is required", EXIT_CONFIG)
    text = _read_corpus(args.corpus)
    out = _out(args)
    rows = []
    for path in args.checkpoint.split(","):
        model, vocab = _load(path)
        if not isinstance(model, DodoLM):
            raise CLIError(f"{path} is not a language-model checkpoint", EXIT_CONFIG)
        if overrides:
            model.config = _model_config(overrides, base=model.config)
        docs = _equal_length_docs(_limit(_docs(text), run), vocab, run.max_len)
        rows.append(evaluate_lm(model, docs, eval_from=run.eval_from, word_lengths_fn=_word_fn(vocab)))
    table = budget_table(rows)
    (out / "budget_table.tsv").write_text(table, encoding="utf-8")
    return {"command": "eval-lm", "rows": [{"model": r.model, "total_states": r.total_states, "compressed_tokens": r.compressed_tokens,
                                            "context_tokens": r.context_tokens, "subword_ppl": r.subword_ppl, "word_ppl": r.word_ppl} for r in rows]}


def _compressor(args) -> tuple:
    model, vocab = _load(args.checkpoint)
    if not isinstance(model, CompressorBundle):
        raise CLIError(f"{args.checkpoint} is not a compressor checkpoint", EXIT_CONFIG)
    return model, vocab


def cmd_eval_autoencode(args, overrides, run: RunOptions) -> dict:
    bundle, vocab = _compressor(args)
    text = _read_corpus(args.corpus)
    out = _out(args)
    r = float(overrides.get("ratio", bundle.config.ratio))
    docs = [d for d in (vocab.encode(t)[: run.max_len] for t in _limit(_docs(text), run)) if d.size >= 2]
    if not docs:
        raise CLIError("corpus holds no usable documents", EXIT_INVARIANT)
    rec = reconstruct_all(bundle, docs, r)
    score = corpus_bleu([list(x) for x in rec], [list(d) for d in docs])
    exact = float(np.mean([np.array_equal(a, b) for a, b in zip(rec, docs)]))
    lines = ["input\treconstruction"] + [f"{escape(vocab.decode(d))}\t{escape(vocab.decode(x))}" for d, x in zip(docs, rec)]
    (out / "reconstructions.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"command": "eval-autoencode", "ratio": r, "docs": len(docs), "bleu": score, "exact_match": exact}


def cmd_compress(args, overrides, run: RunOptions) -> dict:
    bundle, vocab = _compressor(args)
    text = _read_corpus(args.corpus)
    out = _out(args)
    cfg = _model_config(overrides, base=bundle.config)
    docs = [vocab.encode(t)[: run.max_len] for t in _limit(_docs(text), run)]
    mode = "threshold" if run.mode == "threshold" else "topk"
    ks, files = [], []
    with ad.no_grad():
        for i, d in enumerate(docs):
            if d.size == 0:
                continue
            nug = nugget_compress(bundle.encoder, bundle.scorer, bundle.features, cfg, d, mode=mode)
            name = f"nuggets_{i:04d}.dodn"
            save_nuggets(out / name, nug)
            ks.append(nug.selections[0].k)
            files.append(name)
    return {"command": "compress", "mode": mode, "ratio": cfg.ratio, "threshold": cfg.threshold, "files": files, "k": ks,
            "lengths": [int(d.size) for d in docs if d.size]}


def _scorer_parts(model):
    if isinstance(model, CompressorBundle) or model.kind == "dodo":
        return model.scorer, model.features
    raise CLIError("checkpoint has no scorer", EXIT_CONFIG)


def _score_fn(model):
    scorer, features = _scorer_parts(model)
    cfg = model.config

    def fn(tokens):
        with ad.no_grad():
            return score_features(scorer, feature_input(features, cfg, np.asarray(tokens)[None])).data[0]

    return fn


def cmd_inspect_scores(args, overrides, run: RunOptions) -> dict:
    model, vocab = _load(args.checkpoint)
    text = _read_corpus(args.corpus)
    out = _out(args)
    cfg = _model_config(overrides, base=model.config)
    fn = _score_fn(model)
    docs = [d for d in (vocab.encode(t)[: run.max_len] for t in _limit(_docs(text), run)) if d.size]
    mode = "threshold" if run.mode == "threshold" else "topk"
    stats = selection_frequency_stats(fn, docs, cfg.ratio, mode, cfg.threshold if mode == "threshold" else None)
    chunks = []
    for d in docs:
        s = fn(d)
        sel = select_topk(s, cfg.ratio) if mode == "topk" else select_threshold(s, cfg.threshold)
        chunks.append(inspection_dump(d, s, sel.indices, vocab.token_text))
    (out / "scores.tsv").write_text("\n".join(chunks), encoding="utf-8")
    (out / "frequency.tsv").write_text(stats.to_tsv(vocab.token_text), encoding="utf-8")
    top = [[vocab.token_text(t), sf, cf] for t, sf, cf in stats.rows()[:10]]
    return {"command": "inspect-scores", "mode": mode, "docs": len(docs), "selected": stats.n_selected, "tokens": stats.n_tokens,
            "top10_coverage": stats.top_coverage(10), "top10": top}


def cmd_oracle(args, overrides, run: RunOptions) -> dict:
    bundle, vocab = _compressor(args)
    text = _read_corpus(args.corpus)
    out = _out(args)
    r = float(overrides.get("ratio", bundle.config.ratio))
    docs = [d for d in (vocab.encode(t)[: run.max_len] for t in _limit(_docs(text), run)) if d.size >= 2]
    reports = []
    for d in docs:
        k = math.ceil(d.size / r)
        ex = math.comb(int(d.size), k) <= run.exhaustive_limit
        rep = oracle_report(bundle, d, r, exhaustive=ex)
        if rep["final_ppl"] > rep["initial_ppl"]:
            raise CLIError("oracle increased perplexity", EXIT_INVARIANT)
        reports.append(rep)
    lines = ["doc\tk\tinitial\tfinal\tinitial_ppl\tfinal_ppl\treplaced_fraction\texhaustive_min_ppl"]
    for i, rep in enumerate(reports):
        lines.append("\t".join([str(i), str(len(rep["initial"])), " ".join(map(str, rep["initial"])), " ".join(map(str, rep["final"])),
                                f"{rep['initial_ppl']:.6f}", f"{rep['final_ppl']:.6f}", f"{rep['replaced_fraction']:.4f}",
                                f"{rep['exhaustive_min_ppl']:.6f}" if "exhaustive_min_ppl" in rep else "nan"]))
    (out / "oracle.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    summary = {"command": "oracle", "ratio": r, "docs": len(reports), "reports": reports}
    if reports:
        summary["mean_replaced_fraction"] = float(np.mean([x["replaced_fraction"] for x in reports]))
        summary["mean_initial_ppl"] = float(np.mean([x["initial_ppl"] for x in reports]))
        summary["mean_final_ppl"] = float(np.mean([x["final_ppl"] for x in reports]))
    for rep in reports:
        rep.pop("swaps", None)
    return summary


def cmd_calibrate_threshold(args, overrides, run: RunOptions) -> dict:
    model, vocab = _load(args.checkpoint)
    text = _read_corpus(args.corpus)
    out = _out(args)
    r = float(overrides.get("ratio", model.config.ratio))
    fn = _score_fn(model)
    docs = [d for d in (vocab.encode(t)[: run.max_len] for t in _limit(_docs(text), run)) if d.size]
    cut = max(1, int(round(len(docs) * run.holdout))) if len(docs) > 1 else len(docs)
    fit_docs, held = docs[:cut], docs[cut:]
    lam = threshold_for_ratio(np.concatenate([fn(d) for d in fit_docs]), r)
    summary = {"command": "calibrate-threshold", "ratio": r, "threshold": lam, "fit_tokens": int(sum(d.size for d in fit_docs))}
    if held:
        s = np.concatenate([fn(d) for d in held])
        summary["heldout_tokens"] = int(s.size)
        summary["heldout_selected_fraction"] = float(np.mean(s > lam))
    (out / "threshold.txt").write_text(repr(lam) + "\n", encoding="utf-8")
    if isinstance(model, DodoLM):
        model.config = model.config.replace(threshold=lam)
        _save(out / "calibrated.ckpt", model, vocab)
    return summary


HANDLERS = {
    "train-compressor": cmd_train_compressor,
    "train-lm": cmd_train_lm,
    "eval-lm": cmd_eval_lm,
    "eval-autoencode": cmd_eval_autoencode,
    "compress": cmd_compress,
    "inspect-scores": cmd_inspect_scores,
    "oracle": cmd_oracle,
    "calibrate-threshold": cmd_calibrate_threshold,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nuggets", description="Train and evaluate nugget-compressed transformers.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value file; command-line flags override it")
    p.add_argument("--corpus", help="UTF-8 text, one document per line")
    p.add_argument("--checkpoint", help="checkpoint path (comma-separated list for eval-lm)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--ratio", type=float)
    p.add_argument("--tau", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--segment", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=("topk", "threshold", "calibrate"))
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides, run = resolve(args)
        summary = HANDLERS[args.command](args, overrides, run)
        write_summary(_out(args), summary)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CalibrationError, EmptyInputError, PositionError, SequenceLengthError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    return 0


if __name__ == "__main__":
    sys.exit(main())
