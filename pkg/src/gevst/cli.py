"""Command-line surface.

Subcommands: gen-data, train (xe|scst), caption, eval, dump-attention,
ablate. Every artifact-producing command writes one manifest JSON recording
the config snapshot, seed, dataset content hash, output paths, and wall
timings (the one field allowed to differ between reruns). Everything else is
byte-identical for identical flags and seed.

Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage.
GEVST_THREADS caps ablate's worker-process count.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import ablation, metrics, training
from .config import config_from_dict
from .data import read_jsonl, tokenize, write_jsonl
from .decoder import beam_search
from .errors import GevstError, InputError
from .model import caption_logits, encode_sample, make_step_fn
from .training import (load_checkpoint, restore_snapshot, save_checkpoint,
                       train_scst, train_xe, write_curve)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, command, cfg, seed, data_path, outputs, timings):
    manifest = {
        "command": command,
        "config": None if cfg is None else cfg.to_dict(),
        "seed": seed,
        "dataset_sha256": None if data_path is None else _sha256(data_path),
        "outputs": sorted(outputs),
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_config(path, **overrides):
    base = {}
    if path:
        with open(path) as f:
            base = json.load(f)
    base.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(base)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    t0 = time.time()
    from .data import generate_dataset

    samples = generate_dataset(args.seed, args.n)
    write_jsonl(samples, args.out)
    _write_manifest(args.out + ".manifest.json", "gen-data", None, args.seed,
                    args.out, [args.out], {"total": time.time() - t0})
    return 0


def cmd_train(args):
    t0 = time.time()
    samples = read_jsonl(args.data)
    os.makedirs(args.out, exist_ok=True)

    if args.phase == "xe":
        cfg = _load_config(args.config, seed=args.seed)
        if args.init:
            _, vocab, params, steps = load_checkpoint(args.init)
            out = train_xe(samples, cfg, params=params, vocab=vocab, start_step=steps)
        else:
            out = train_xe(samples, cfg)
        curve_path = os.path.join(args.out, "loss_curve.csv")
        write_curve(curve_path, out.curve, "loss")
    else:
        if not args.init:
            raise InputError("--phase scst requires --init with an XE checkpoint")
        cfg, vocab, params, steps = load_checkpoint(args.init)
        if args.config or args.seed is not None:
            merged = cfg.to_dict()
            if args.config:
                with open(args.config) as f:
                    merged.update(json.load(f))
            if args.seed is not None:
                merged["seed"] = args.seed
            cfg = config_from_dict(merged)
        out = train_scst(samples, cfg, params, vocab, start_step=steps)
        curve_path = os.path.join(args.out, "reward_curve.csv")
        write_curve(curve_path, out.curve, "reward")
        if "warning" in out.diagnostics:
            print(f"warning: {out.diagnostics['warning']}", file=sys.stderr)

    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    restore_snapshot(out.params, out.best_snapshot)
    save_checkpoint(ckpt_path, out.cfg, out.vocab, out.params, out.trained_steps)
    train_s = time.time() - t0
    _write_manifest(os.path.join(args.out, "manifest.json"), f"train-{args.phase}",
                    out.cfg, out.cfg.seed, args.data, [ckpt_path, curve_path],
                    {"total": train_s})
    return 0


def cmd_caption(args):
    t0 = time.time()
    cfg, vocab, params, _ = load_checkpoint(args.ckpt)
    samples = read_jsonl(args.data)
    beam = args.beam if args.beam is not None else cfg.beam
    rows = []
    for s in samples:
        branch = encode_sample(params, cfg, s, vocab)
        ids, cum, _ = beam_search(make_step_fn(params, cfg, branch),
                                  beam=beam, max_len=cfg.max_len)
        rows.append({"id": s.id,
                     "caption": " ".join(training.caption_tokens(vocab, ids)),
                     "logprob": cum})
    with open(args.out, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    _write_manifest(args.out + ".manifest.json", "caption", cfg, cfg.seed,
                    args.data, [args.out], {"total": time.time() - t0})
    return 0


def cmd_eval(args):
    t0 = time.time()
    refs_by_id = {s.id: [tokenize(c) for c in s.gt_captions] for s in read_jsonl(args.refs)}
    cands, refs = [], []
    with open(args.pred) as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            if row["id"] not in refs_by_id:
                raise InputError(f"prediction id {row['id']!r} not present in references")
            cands.append(tokenize(row["caption"]))
            refs.append(refs_by_id[row["id"]])
    report = metrics.evaluate(cands, refs)
    with open(args.out, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_manifest(args.out + ".manifest.json", "eval", None, None,
                    args.refs, [args.out], {"total": time.time() - t0})
    return 0


def _write_matrix_csv(path, arr):
    with open(path, "w") as f:
        for row in np.atleast_2d(arr):
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def cmd_dump_attention(args):
    t0 = time.time()
    cfg, vocab, params, _ = load_checkpoint(args.ckpt)
    samples = {s.id: s for s in read_jsonl(args.data)}
    if args.sample_id not in samples:
        raise InputError(f"sample id {args.sample_id!r} not found in {args.data}")
    sample = samples[args.sample_id]
    os.makedirs(args.out, exist_ok=True)
    outputs = []

    enc_trace = {}
    branch = encode_sample(params, cfg, sample, vocab, trace=enc_trace)
    for direction in ("fusion_vs", "fusion_sv"):
        for cell_i, cell in enumerate(enc_trace.get(direction, []), start=1):
            for kind in ("content", "geometry"):
                path = os.path.join(args.out, f"{direction}_cell{cell_i}_{kind}.csv")
                _write_matrix_csv(path, cell[kind])
                outputs.append(path)

    for b, gate_list in sorted(enc_trace.get("gates", {}).items()):
        path = os.path.join(args.out, f"gesa_gates_{b}.csv")
        with open(path, "w") as f:
            f.write("layer,c1,c2,c3\n")
            for li, gates in enumerate(gate_list, start=1):
                vals = [repr(float(v)) for v in np.ravel(gates)]
                vals += [""] * (3 - len(vals))
                f.write(f"{li}," + ",".join(vals) + "\n")
        outputs.append(path)

    from .decoder import greedy_decode
    ids, _ = greedy_decode(make_step_fn(params, cfg, branch), max_len=cfg.max_len)
    dec_trace = []
    from .data import BOS_ID
    caption_logits(params, cfg, branch, [BOS_ID] + ids[:-1], trace=dec_trace)
    # dec_trace: one {branch: per-step mean gate} dict per decoder layer
    branches = sorted(dec_trace[0]) if dec_trace else []
    path = os.path.join(args.out, "decoder_gates.csv")
    with open(path, "w") as f:
        f.write("step," + ",".join(branches) + "\n")
        steps = len(ids)
        for t in range(steps):
            means = [np.mean([layer[b][t] for layer in dec_trace]) for b in branches]
            f.write(f"{t+1}," + ",".join(repr(float(v)) for v in means) + "\n")
    outputs.append(path)

    _write_manifest(os.path.join(args.out, "manifest.json"), "dump-attention",
                    cfg, cfg.seed, args.data, outputs, {"total": time.time() - t0})
    return 0


def cmd_ablate(args):
    t0 = time.time()
    samples = read_jsonl(args.data)
    cfg = _load_config(args.config, seed=args.seed)
    workers = max(1, int(os.environ.get("GEVST_THREADS", "1")))
    os.makedirs(args.out, exist_ok=True)
    rows, notes = ablation.run_axis(args.axis, samples, cfg, out_dir=args.out,
                                    epochs=args.epochs, workers=workers)
    outputs = [os.path.join(args.out, "table.csv"), os.path.join(args.out, "table.md")]
    _write_manifest(os.path.join(args.out, "manifest.json"), f"ablate-{args.axis}",
                    cfg, cfg.seed, args.data, outputs, {"total": time.time() - t0})
    for note in notes:
        print(note)
    return 0


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="gevst",
                                description="Geometry-entangled captioner: data, training, inference, evaluation, inspection.")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset (JSONL)")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model (xe phase, or scst from an XE checkpoint)")
    t.add_argument("--data", required=True)
    t.add_argument("--phase", choices=("xe", "scst"), default="xe")
    t.add_argument("--config", help="JSON file of config overrides")
    t.add_argument("--init", help="checkpoint to start from (required for scst)")
    t.add_argument("--seed", type=int, help="override config seed")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("caption", help="generate captions for a dataset")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--beam", type=int)
    c.add_argument("--out", required=True, help="output JSONL")
    c.set_defaults(fn=cmd_caption)

    e = sub.add_parser("eval", help="score predicted captions against references")
    e.add_argument("--pred", required=True, help="caption JSONL")
    e.add_argument("--refs", required=True, help="dataset JSONL with gt captions")
    e.add_argument("--out", required=True, help="metrics JSON")
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("dump-attention", help="export attention maps, gates, and decoder modulation for one sample")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--sample-id", required=True)
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(fn=cmd_dump_attention)

    a = sub.add_parser("ablate", help="run a configuration sweep and emit result tables")
    a.add_argument("--data", required=True)
    a.add_argument("--axis", choices=ablation.AXES, required=True)
    a.add_argument("--config", help="JSON file of config overrides")
    a.add_argument("--seed", type=int, help="override config seed")
    a.add_argument("--epochs", type=int, help="override XE epochs per config")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(fn=cmd_ablate)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except GevstError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
