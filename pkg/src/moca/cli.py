"""Command-line entry point wiring all pipeline stages.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every emitted file starts with a header carrying version, seed, and config
hash; outputs contain no timestamps, so identical runs are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, resolve_seed
from .errors import DataError, MocaError, NumericalError
from .corpus_curator import (
    CurationConfig,
    curate,
    read_corpus,
    write_corpus,
    write_report,
)
from .cgma_engine import dump_attention, progressive_grad_check, progressive_update
from .gme import (
    EnsembleWeights,
    gate_sweep,
    init_model,
    load_model,
    predict,
    save_model,
)
from .numerics import Matrix
from .retrieval import retrieve, strategy as make_strategy
from .span_masker import MaskPolicy, MaskStats, MaskedExample, mask_sequence
from .text_pipeline import QuestionRecord, Vocab, normalize_lso, read_records
from .toy_trainer import TrainConfig, mc_train_accuracy, train

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        print(f"moca: error code=1 kind=usage msg={message}", file=sys.stderr)
        raise SystemExit(1)


def _header(seed: int, config_hash: str) -> str:
    return f"# moca={__version__} seed={seed} config={config_hash}"


def _jsonl_header(seed: int, config_hash: str) -> str:
    return json.dumps({"_moca": {"version": __version__, "seed": seed, "config": config_hash}})


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise DataError(f"input path does not exist: {p}")


def _args_hash(args: argparse.Namespace, keys: list[str]) -> str:
    import hashlib

    canon = json.dumps({k: str(getattr(args, k)) for k in keys}, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


# --------------------------------------------------------------------------
# Subcommand handlers
# --------------------------------------------------------------------------


def _cmd_curate(args) -> int:
    _require_files(args.coarse, args.tqa)
    seed = resolve_seed(0)  # curation is deterministic; seed only labels outputs
    cfg = CurationConfig(
        delta=args.delta,
        top_k=args.top_k,
        target_fraction=args.target_frac,
        max_iterations=args.max_iters,
        penalty_mode=args.penalty,
    )
    chash = _args_hash(args, ["delta", "top_k", "target_frac", "max_iters", "penalty"])
    coarse = read_corpus(args.coarse)
    tqa = read_corpus(args.tqa)
    fine, stats = curate(coarse, tqa, cfg)
    write_corpus(args.out, fine, header=_header(seed, chash))
    write_report(args.report, stats, header=_header(seed, chash))
    last = stats[-1]
    print(
        f"curate: {len(coarse)} -> {len(fine)} lines in {len(stats)} iterations "
        f"(tokens {last.tokens_out}, overlap {last.overlap_size})"
    )
    return 0


def _cmd_mask(args) -> int:
    _require_files(args.infile, args.vocab)
    seed = resolve_seed(0, args.seed)
    vocab = Vocab.load(args.vocab)
    mode = {"span": "span", "random": "random", "wholeword": "whole_word"}[args.mode]
    policy = MaskPolicy(mode=mode, budget=args.budget, geo_p=args.geo_p)
    chash = _args_hash(args, ["mode", "budget", "geo_p"])
    stats = MaskStats()
    count = 0
    with open(args.infile, encoding="utf-8") as fin, open(
        args.out, "w", encoding="utf-8"
    ) as fout:
        fout.write(_jsonl_header(seed, chash) + "\n")
        for i, line in enumerate(ln for ln in fin if ln.strip()):
            obj = json.loads(line)
            if "_moca" in obj:
                continue
            ids = np.asarray(obj["ids"], dtype=np.int64)
            words = [tuple(w) for w in obj.get("words", [])] or None
            example = mask_sequence(ids, vocab, policy, seed + i, word_boundaries=words)
            stats.update(ids, example, vocab.mask_id)
            fout.write(example.to_json() + "\n")
            count += 1
    if args.stats:
        with open(args.stats, "w", encoding="utf-8", newline="") as fh:
            fh.write(_header(seed, chash) + "\n")
            writer = csv.writer(fh)
            writer.writerow(["stat", "value"])
            for name, value in stats.rows():
                writer.writerow([name, repr(float(value))])
    print(f"mask: wrote {count} examples ({args.mode} mode)")
    return 0


def _cmd_lso(args) -> int:
    _require_files(args.infile)
    seed = resolve_seed(0)
    chash = _args_hash(args, [])
    records = read_records(args.infile)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(_jsonl_header(seed, chash) + "\n")
        for record in records:
            record.options = normalize_lso(record.options)
            fh.write(record.to_json() + "\n")
    print(f"lso: rewrote {len(records)} records")
    return 0


def _cmd_retrieve(args) -> int:
    _require_files(args.lesson, args.question)
    seed = resolve_seed(0)
    chash = _args_hash(args, ["strategy", "budget"])
    lesson = Path(args.lesson).read_text(encoding="utf-8")
    query = Path(args.question).read_text(encoding="utf-8").strip()
    context = retrieve(query, lesson, make_strategy(args.strategy), args.budget)
    payload = {"_moca": {"version": __version__, "seed": seed, "config": chash}}
    payload.update(context.to_dict())
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _load_model_for(args, config: RunConfig, vocab: Vocab):
    if getattr(args, "params", None):
        _require_files(args.params)
        return load_model(config, vocab, args.params)
    return init_model(config, vocab, seed=config.seed)


def _cmd_train(args) -> int:
    _require_files(args.data, args.config, args.vocab, getattr(args, "init_params", None))
    config = RunConfig.load(args.config)
    seed = resolve_seed(config.seed)
    config.seed = seed
    vocab = Vocab.load(args.vocab)
    model = (
        load_model(config, vocab, args.init_params)
        if args.init_params
        else init_model(config, vocab, seed=seed)
    )
    objective = args.objective or config.train.objective
    tcfg = TrainConfig(
        steps=config.train.steps,
        batch_size=config.train.batch_size,
        lr=config.train.lr,
        seed=seed,
        objective=objective,
    )
    if objective == "mlm":
        with open(args.data, encoding="utf-8") as fh:
            data = [
                MaskedExample.from_json(ln)
                for ln in fh
                if ln.strip() and "_moca" not in json.loads(ln)
            ]
    else:
        data = read_records(args.data)
    result = train(model, data, tcfg)
    save_model(result.model, args.out_params)
    chash = config.config_hash()
    with open(args.curve, "w", encoding="utf-8", newline="") as fh:
        fh.write(_header(seed, chash) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(result.curve):
            writer.writerow([step, repr(loss)])
    line = f"train[{objective}]: {len(result.curve)} steps, loss {result.curve[0]:.4f} -> {result.curve[-1]:.4f}"
    if objective == "mc":
        line += f", train accuracy {mc_train_accuracy(result.model, data):.3f}"
    print(line)
    return 0


def _cmd_predict(args) -> int:
    _require_files(args.records, args.params, args.config, args.vocab)
    config = RunConfig.load(args.config)
    seed = resolve_seed(config.seed)
    config.seed = seed
    vocab = Vocab.load(args.vocab)
    model = load_model(config, vocab, args.params)
    weights = EnsembleWeights(lambda1=args.l1, lambda2=args.l2, mu=args.mu)
    records = read_records(args.records)
    if not records:
        raise DataError("predict: no records in input")
    diagram_dir = Path(args.records).resolve().parent
    chash = config.config_hash()
    correct = total_gold = 0
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(_header(seed, chash) + "\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["record_id", "option_index", "score", "probability", "predicted_index", "answer_index"]
        )
        for record in records:
            scores = predict(record, model, weights, diagram_dir=diagram_dir)
            for j, (s, p) in enumerate(zip(scores.scores, scores.probabilities)):
                writer.writerow(
                    [
                        record.id,
                        j,
                        repr(s),
                        repr(p),
                        scores.predicted_index,
                        "" if record.answer_index is None else record.answer_index,
                    ]
                )
            if record.answer_index is not None:
                total_gold += 1
                correct += int(scores.predicted_index == record.answer_index)
    msg = f"predict: scored {len(records)} records"
    if total_gold:
        msg += f", accuracy {correct / total_gold:.3f} on {total_gold} labeled"
    print(msg)
    return 0


def _parse_grid(spec: str) -> list[float]:
    try:
        start, stop, step = (float(x) for x in spec.split(":"))
    except ValueError as e:
        raise DataError(f"grid must be start:stop:step, got {spec!r}") from e
    if step <= 0:
        raise DataError("grid step must be positive")
    values = []
    k = 0
    while True:
        v = round(start + k * step, 10)
        if v > stop + 1e-9:
            break
        values.append(v)
        k += 1
    return values


def _cmd_gate_sweep(args) -> int:
    _require_files(args.records, args.params, args.config, args.vocab)
    config = RunConfig.load(args.config)
    seed = resolve_seed(config.seed)
    config.seed = seed
    vocab = Vocab.load(args.vocab)
    model = load_model(config, vocab, args.params)
    weights = EnsembleWeights(lambda1=args.l1, lambda2=args.l2, mu=config.mu)
    records = read_records(args.records)
    rows = gate_sweep(
        records, model, weights, _parse_grid(args.grid),
        diagram_dir=Path(args.records).resolve().parent,
    )
    chash = config.config_hash()
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(_header(seed, chash) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["mu", "accuracy", "n"])
        for mu, acc, n in rows:
            writer.writerow([repr(mu), repr(acc), n])
    best = max(rows, key=lambda r: r[1])
    print(f"gate-sweep: {len(rows)} points, best mu={best[0]} accuracy={best[1]:.3f}")
    return 0


def _cmd_attn_dump(args) -> int:
    _require_files(args.config, args.vocab, getattr(args, "params", None))
    config = RunConfig.load(args.config)
    seed = resolve_seed(config.seed, args.seed)
    config.seed = seed
    vocab = Vocab.load(args.vocab)
    model = _load_model_for(args, config, vocab)
    rng = np.random.default_rng(seed)
    f_t = Matrix(rng.standard_normal((config.n, config.d)))
    f_qd = Matrix(rng.standard_normal((config.n, config.d)))
    f_id = Matrix(rng.standard_normal((config.n, config.d)))
    updated = progressive_update(f_t, f_qd, f_id, model.cgma, capture=True)
    captured = updated.attention[args.block]
    heads = len(model.cgma.qd_block.layers[0].heads)
    layer_slice = captured[args.layer * heads : (args.layer + 1) * heads]
    if not layer_slice:
        raise DataError(f"no captured weights for block {args.block} layer {args.layer}")
    axis = 0 if args.axis == "query" else 1
    rows = dump_attention(
        layer_slice,
        args.out,
        interpolate_to=args.interpolate_to,
        axis=axis,
        header=_header(seed, config.config_hash()),
    )
    print(f"attn-dump: wrote {rows} weights for block {args.block} layer {args.layer}")
    return 0


def _cmd_gradcheck(args) -> int:
    try:
        n, d = (int(x) for x in args.dims.split(","))
    except ValueError as e:
        raise DataError(f"--dims must be N,D, got {args.dims!r}") from e
    seed = resolve_seed(0, args.seed)
    err = progressive_grad_check(n, d, args.heads, args.layers, seed, eps=args.eps)
    print(f"max_rel_err={err:.3e} tolerance={GRADCHECK_TOLERANCE:.0e}")
    if err <= GRADCHECK_TOLERANCE:
        return 0
    print(
        f"moca: error code=3 kind=numerical msg=gradient check failed ({err:.3e})",
        file=sys.stderr,
    )
    return 3


# --------------------------------------------------------------------------
# Parser wiring
# --------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="moca", description=__doc__)
    parser.add_argument("--version", action="version", version=f"moca {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curate", help="filter a coarse corpus into a terminology corpus")
    p.add_argument("--coarse", required=True)
    p.add_argument("--tqa", required=True)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--target-frac", type=float, default=0.5, dest="target_frac")
    p.add_argument("--max-iters", type=int, default=10, dest="max_iters")
    p.add_argument("--top-k", type=int, default=1000, dest="top_k")
    p.add_argument("--penalty", choices=["tokens", "distinct"], default="tokens")
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_curate)

    p = sub.add_parser("mask", help="generate masked pretraining examples")
    p.add_argument("--in", required=True, dest="infile")
    p.add_argument("--vocab", required=True)
    p.add_argument("--mode", choices=["span", "random", "wholeword"], default="span")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=float, default=0.15)
    p.add_argument("--geo-p", type=float, default=0.2, dest="geo_p")
    p.add_argument("--out", required=True)
    p.add_argument("--stats", default=None)
    p.set_defaults(func=_cmd_mask)

    p = sub.add_parser("lso", help="rewrite latent semantic options")
    p.add_argument("--in", required=True, dest="infile")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_lso)

    p = sub.add_parser("retrieve", help="rank background sentences for a query")
    p.add_argument("--lesson", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--strategy", choices=["ir", "nsp", "nn"], default="ir")
    p.add_argument("--budget", type=int, default=130)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("train", help="run a toy training phase")
    p.add_argument("--objective", choices=["mlm", "mc"], default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--init-params", default=None, dest="init_params")
    p.add_argument("--out-params", required=True, dest="out_params")
    p.add_argument("--curve", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="score records through the full pipeline")
    p.add_argument("--records", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--mu", type=float, default=0.6)
    p.add_argument("--l1", type=float, default=1.0 / 3.0)
    p.add_argument("--l2", type=float, default=1.0 / 3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("gate-sweep", help="accuracy across a mu grid")
    p.add_argument("--records", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--grid", default="0:1:0.1")
    p.add_argument("--l1", type=float, default=1.0 / 3.0)
    p.add_argument("--l2", type=float, default=1.0 / 3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gate_sweep)

    p = sub.add_parser("attn-dump", help="dump attention weights as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--block", choices=["qd", "text", "id"], default="qd")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--interpolate-to", type=int, default=None, dest="interpolate_to")
    p.add_argument("--axis", choices=["query", "key"], default="key")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_attn_dump)

    p = sub.add_parser("gradcheck", help="finite-difference check of the attention core")
    p.add_argument("--dims", default="6,8", help="N,D")
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"moca: error code=3 kind=numerical msg={e}", file=sys.stderr)
        return 3
    except (DataError, MocaError, OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"moca: error code=2 kind=data msg={e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
