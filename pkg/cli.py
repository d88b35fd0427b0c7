#!/usr/bin/env python3
"""
Streaming G2PnP Command Line
Data generation, training, evaluation, streaming demo, mask analysis,
latency bench and the training ablations.

Usage:
    python cli.py [--config FILE] [--seed N] [--out DIR] [--set key=value ...] <command> [options]

Commands:
    gen-data      write train.json / valid.json synthetic splits
    train         train a model, write checkpoint and training log
    eval          score a checkpoint on a dataset, or hyp/ref symbol files
    stream        push tokens from stdin through the streaming engine
    analyze-mask  render layer masks and the receptive-field table
    bench         Start-latency measurement for a simulated token interval
    ablate        run one of the training studies

Exit codes: 0 ok, 1 unexpected, 2 config, 3 input/dataset, 4 stream state,
5 dimension/contract, 6 diverged training.
"""

import argparse
import logging
import os
import struct
import sys
from typing import Iterator, List, Optional, Sequence, Tuple

import numerics as nx
from config import RunConfig, dump_run_config, load_run_config, parse_overrides
from corpus import DatasetFile, SyntheticRules, ambiguous_positions, generate, oracle_alignment, vocab_hash
from encoder import StreamingConformer
from engine import bench_stream, close, open_stream, push_token
from exceptions import DatasetError, G2PnPError, InputError
from experiments import STUDIES, prepare_data, run_study, summarize
from masking import build_token_mask, effective_lookahead, render_mask
from metrics import evaluate, read_symbol_file, write_report
from trainer import decode_dataset, train

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="g2pnp", description="Streaming G2PnP toolkit")
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int, help="run seed (overrides config)")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="config override, repeatable")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate synthetic train/valid splits")
    gen.add_argument("--n", type=int, default=20000, help="training sentences")
    gen.add_argument("--n-valid", type=int, default=500, help="validation sentences")
    gen.add_argument("--radius", type=int, default=1, help="right-context radius of ambiguous graphemes")
    gen.add_argument("--len-min", type=int, default=4)
    gen.add_argument("--len-max", type=int, default=32)

    sub.add_parser("train", help="train a model from the configured datasets")

    ev = sub.add_parser("eval", help="score a model or symbol files")
    ev.add_argument("--checkpoint", help="model checkpoint (.npz)")
    ev.add_argument("--data", help="dataset file to decode (defaults to valid_path)")
    ev.add_argument("--hyps", help="hypothesis symbol file (one sentence per line)")
    ev.add_argument("--refs", help="reference symbol file (one sentence per line)")
    ev.add_argument("--offline", action="store_true", help="masked full-sequence decoding instead of streaming")
    ev.add_argument("--limit", type=int, help="decode only the first N records")
    ev.add_argument("--name", default="model", help="row name in the results table")
    ev.add_argument("--float64", action="store_true", help="decode in float64 instead of float32")

    st = sub.add_parser("stream", help="stream grapheme tokens from stdin")
    st.add_argument("--checkpoint", required=True)
    st.add_argument("--binary", action="store_true",
                    help="stdin carries 2-byte big-endian length-prefixed UTF-8 tokens")
    st.add_argument("--float64", action="store_true", help="decode in float64 instead of float32")

    am = sub.add_parser("analyze-mask", help="render masks and the receptive-field table")
    am.add_argument("--tokens", type=int, help="sequence length in tokens (default 3 chunks)")
    am.add_argument("--regular-window", type=int, help="also analyze a regular look-ahead baseline")

    bench = sub.add_parser("bench", help="measure Start latency")
    bench.add_argument("--checkpoint", help="model checkpoint; a freshly initialized model otherwise")
    bench.add_argument("--tau", type=float, default=0.0, help="simulated seconds per upstream token")
    bench.add_argument("--tokens", type=int, default=32, help="stream length")
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument("--float64", action="store_true", help="decode in float64 instead of float32")

    ab = sub.add_parser("ablate", help="run a training study")
    ab.add_argument("--study", choices=STUDIES, required=True)
    ab.add_argument("--n-train", type=int, default=20000)
    ab.add_argument("--n-valid", type=int, default=500)
    ab.add_argument("--seeds", default="0,1,2", help="comma separated replica seeds")
    ab.add_argument("--tau", type=float, default=0.0)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < --config file < --set overrides < --seed."""
    overrides = parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_run_config(args.config, overrides)


def inference_precision(args: argparse.Namespace) -> str:
    return "float64" if getattr(args, "float64", False) else "float32"


def load_model_and_rules(path: str, precision: str = "float32") -> Tuple[StreamingConformer, SyntheticRules]:
    """Load a checkpoint, cast for inference, together with the rules of its dataset."""
    model = StreamingConformer.load(path, precision=precision)
    _, meta = nx.load_checkpoint(path)
    dataset = meta.get("dataset")
    if not dataset:
        raise DatasetError(f"Checkpoint {path} does not record its dataset rules")
    rules = SyntheticRules.from_seed(dataset["rules_seed"], dataset["radius"])
    if vocab_hash(rules.vocab.symbols) != dataset.get("label_hash"):
        raise DatasetError(f"Checkpoint {path} was trained on another label vocabulary")
    return model, rules


def read_tokens(stream, binary: bool) -> Iterator[str]:
    """Yield grapheme tokens from text lines or length-prefixed binary records."""
    if not binary:
        for line in stream:
            token = line.strip()
            if token:
                yield token
        return
    while True:
        prefix = stream.read(2)
        if not prefix:
            return
        if len(prefix) < 2:
            raise InputError("Truncated length prefix on stdin")
        (length,) = struct.unpack(">H", prefix)
        payload = stream.read(length)
        if len(payload) < length:
            raise InputError("Truncated token record on stdin")
        yield payload.decode("utf-8")


def cmd_gen_data(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    for split, count in (("train", args.n), ("valid", args.n_valid)):
        dataset = generate(cfg.seed, count, (args.len_min, args.len_max), args.radius, split)
        dataset.write(os.path.join(args.out, f"{split}.json"))
    print(f"✅ Wrote {args.n} training and {args.n_valid} validation sentences to {args.out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    flat = cfg.to_flat()
    if not os.path.isabs(cfg.checkpoint) and os.path.dirname(cfg.checkpoint) == "":
        flat["checkpoint"] = os.path.join(args.out, cfg.checkpoint)
    cfg = RunConfig.from_flat(flat)
    with open(os.path.join(args.out, "run.conf"), "w", encoding="utf-8") as f:
        f.write(dump_run_config(cfg))
    result = train(cfg, os.path.join(args.out, "train_log.csv"))
    print("=" * 60)
    print("TRAINING COMPLETE")
    print("=" * 60)
    print(f"✅ Steps:      {result.steps}")
    print(f"💾 Checkpoint: {result.checkpoint}")
    if result.final_valid_cer is not None:
        print(f"📊 Valid PnP CER: {result.final_valid_cer:.2f}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    spans = chunk_size = ambiguous = None
    row = {}
    if args.hyps or args.refs:
        if not (args.hyps and args.refs):
            raise InputError("--hyps and --refs must be given together")
        hyps, refs = read_symbol_file(args.hyps), read_symbol_file(args.refs)
    else:
        if not args.checkpoint:
            raise InputError("eval needs --checkpoint or --hyps/--refs")
        model, _ = load_model_and_rules(args.checkpoint, inference_precision(args))
        dataset = DatasetFile.read(args.data or cfg.valid_path)
        rules = dataset.rules()
        hyps, refs = decode_dataset(model, dataset, offline=args.offline, limit=args.limit)
        records = dataset.records[:len(refs)]
        spans = [oracle_alignment(rules, g)[1] for g, _ in records]
        ambiguous = [ambiguous_positions(rules, g) for g, _ in records]
        s = model.cfg
        chunk_size = s.chunk_size
        row = dict(past=s.past_context, chunk=s.chunk_size, lookahead=s.lookahead) \
            if not s.full_context else dict(past="-", chunk="-", lookahead="-")
    report = evaluate(hyps, refs, spans, chunk_size, ambiguous)
    write_report(report, os.path.join(args.out, "report.txt"),
                 os.path.join(args.out, "results.csv"), name=args.name, **row)
    print(report.to_text(), end="")
    return 0


def cmd_stream(args, cfg: RunConfig) -> int:
    model, rules = load_model_and_rules(args.checkpoint, inference_precision(args))
    state = open_stream(model)
    index = rules.grapheme_index
    source = sys.stdin.buffer if args.binary else sys.stdin

    def emit(symbols: Sequence[int]):
        for symbol in symbols:
            print(f"arrival={state.n_received} symbol={rules.vocab.symbols[symbol]}", flush=True)

    for token in read_tokens(source, args.binary):
        if token not in index:
            raise InputError(f"Unknown grapheme {token!r}")
        emit(push_token(state, index[token]))
    emit(close(state))
    return 0


def cmd_analyze_mask(args, cfg: RunConfig) -> int:
    s = cfg.streaming
    n_tokens = args.tokens or 3 * s.chunk_size
    os.makedirs(args.out, exist_ok=True)
    shown = [1] if s.n_layers == 1 else [1, 2]
    for layer in shown:
        print(render_mask(build_token_mask(n_tokens, s, layer)))
        print()
    report = effective_lookahead(s, n_tokens)
    table = report.to_frame()
    path = os.path.join(args.out, "receptive_field.tsv")
    table.to_csv(path, sep="\t", index=False)
    print(table.to_csv(sep="\t", index=False), end="")
    print(f"per_offset_lookahead={report.per_offset_lookahead} "
          f"constant_across_layers={report.constant_across_layers}")
    if args.regular_window is not None:
        regular = effective_lookahead(s, n_tokens, mode="regular", window=args.regular_window)
        regular.to_frame().to_csv(os.path.join(args.out, "receptive_field_regular.tsv"), sep="\t", index=False)
        growth = [int(row.max()) for row in regular.per_layer_lookahead]
        print(f"regular_window={args.regular_window} lookahead_per_layer={growth}")
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    if args.checkpoint:
        model, rules = load_model_and_rules(args.checkpoint, inference_precision(args))
    else:
        rules = SyntheticRules.from_seed(cfg.seed)
        streaming = cfg.streaming.replace(precision=inference_precision(args))
        model = StreamingConformer(streaming, len(rules.graphemes), len(rules.vocab), seed=cfg.seed)
    length = min(128, max(4, args.tokens))
    tokens = generate(cfg.seed, 1, (length, length), split="bench").records[0][0]
    record = bench_stream(model, tokens, args.tau, args.repeats)
    print(f"tokens_waited={record.tokens_waited_for_first_output}")
    print(f"first_chunk_compute={record.first_chunk_compute:.6f}")
    print(f"tau={record.tau}")
    print(f"start={record.describe()}")
    print(f"modeled_start={record.modeled_start:.6f}")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    data_dir = os.path.join(args.out, "data")
    train_set, valid_set = prepare_data(data_dir, cfg.seed, args.n_train, args.n_valid)
    frame = run_study(args.study, cfg, train_set, valid_set, os.path.join(args.out, args.study),
                      seeds=seeds, tau=args.tau)
    for line in summarize({args.study: frame}):
        print(line)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "stream": cmd_stream,
    "analyze-mask": cmd_analyze_mask,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except G2PnPError as e:
        logger.error(f"command={args.command} error={type(e).__name__} exit_code={e.exit_code}", exc_info=True)
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.error(f"command={args.command} error={type(e).__name__} exit_code=1", exc_info=True)
        print(f"❌ {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\n⚠ Interrupted by user", file=sys.stderr)
        sys.exit(130)
