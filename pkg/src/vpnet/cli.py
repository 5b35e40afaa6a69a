"""``vpnet`` command line. Each run writes a manifest that ``replay`` can rerun.

Every command writes a ``manifest.json`` into its output directory listing
the resolved arguments, the seed, and a SHA-256 digest of each artifact.
``vpnet replay MANIFEST`` reruns the command and checks the digests.

Exit codes: 0 success, 1 unwritable output path, 2 usage error,
3 artifact mismatch or unreadable input, 4 probe failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import model as M
from . import probes as P
from . import train as TR

OUTPUT_ENV = "VPNET_OUTPUT_DIR"
EXIT_OK, EXIT_UNWRITABLE, EXIT_USAGE, EXIT_ARTIFACT, EXIT_PROBE = 0, 1, 2, 3, 4

# preset name -> (data kind, data config); model presets share the names
DATA_PRESETS = {
    "desk": ("moving", D.MOVING_PRESETS["desk"]),
    "desk-pushing": ("pushing", D.PUSH_PRESETS["desk"]),
    "paper": ("moving", D.MOVING_PRESETS["paper"]),
    "paper-pushing": ("pushing", D.PUSH_PRESETS["paper"]),
}

log = logging.getLogger("vpnet")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# plumbing


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUTPUT_ENV, "vpnet-out")) / command
    try:
        out.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out):
            pass
    except OSError as e:
        raise CliError(f"cannot write to output directory {out}: {e.strerror or e}",
                       EXIT_UNWRITABLE) from None
    return out


def _input(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}", EXIT_ARTIFACT)
    return p.resolve()


def _replay_argv(args, flags) -> list[str]:
    """Fully resolved argv (output flag excluded) that recreates this run."""
    argv = [args.command]
    for flag, dest, kind in flags:
        value = getattr(args, dest)
        if kind == "switch":
            if value:
                argv.append(flag)
        elif kind == "path":
            argv += [flag, str(Path(value).resolve())]
        elif value is not None:
            argv += [flag, str(value)]
    return argv


def _write_manifest(out: Path, args, flags, config: dict, seed, artifacts: list[Path],
                    inputs: list[Path] = (), diagnostics: list[Path] = ()) -> Path:
    """Record how to rerun this command; ``diagnostics`` (timings) are listed without digests."""
    manifest = {
        "command": args.command,
        "argv": _replay_argv(args, flags),
        "config": config,
        "seed": seed,
        "artifacts": {str(p.relative_to(out)): _sha256(p) for p in artifacts},
        "inputs": {str(p): _sha256(p) for p in inputs},
        "diagnostics": [str(p.relative_to(out)) for p in diagnostics],
        "version": __version__,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_run(checkpoint: str, dataset: str):
    ck, ds = _input(checkpoint, "checkpoint"), _input(dataset, "dataset")
    try:
        config, params = M.load_checkpoint(ck)
    except (M.CheckpointError, ValueError) as e:
        raise CliError(f"unreadable checkpoint {ck}: {e}", EXIT_ARTIFACT) from None
    try:
        data = D.load_dataset(ds)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise CliError(f"unreadable dataset {ds}: {e}", EXIT_ARTIFACT) from None
    try:
        TR.check_compatible(config, data)
    except TR.ConfigMismatch as e:
        raise CliError(f"checkpoint and dataset do not match: {e}", EXIT_ARTIFACT) from None
    return ck, ds, config, params, data


def _config_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    return json.loads(json.dumps(d, default=list))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, parser) -> int:
    if args.count < 0:
        parser.error("--count must be >= 0")
    if args.export_pgm < 0:
        parser.error("--export-pgm must be >= 0")
    out = _out_dir(args, "gen-data")
    kind, cfg = DATA_PRESETS[args.preset]
    ds = D.make_fixed_test_set(cfg, args.seed, args.count, kind=kind)
    path = out / "dataset.vseq"
    D.save_dataset(path, ds)
    artifacts = [path]
    if args.export_pgm and len(ds):
        frames_dir = out / "frames"
        frames_dir.mkdir(exist_ok=True)
        for t in range(min(args.export_pgm, ds.videos.shape[1])):
            p = frames_dir / f"seq000_t{t:02d}.pgm"
            D.write_pgm(p, _gray(ds.videos[0, t]))
            artifacts.append(p)
    _write_manifest(out, args, GEN_DATA_FLAGS, {"kind": kind, "data": _config_dict(cfg)},
                    args.seed, artifacts)
    print(f"wrote {len(ds)} sequences of shape {ds.videos.shape[1:]} to {path}")
    return EXIT_OK


def _train_config(args, parser) -> tuple[M.ModelConfig, object]:
    _, data_cfg = DATA_PRESETS[args.preset]
    model_cfg = M.preset(args.preset, kind=args.model)
    model_cfg = model_cfg.variant(block_kind=args.block, dilation=args.dilation == "on")
    if args.zero_actions and not model_cfg.cond_dim:
        parser.error(f"--zero-actions needs a preset with actions; {args.preset!r} has none")
    if args.steps < 0:
        parser.error("--steps must be >= 0")
    if args.batch_size < 1:
        parser.error("--batch-size must be >= 1")
    if args.lr <= 0:
        parser.error("--lr must be positive")
    if args.checkpoint_every < 0:
        parser.error("--checkpoint-every must be >= 0")
    return model_cfg, data_cfg


def cmd_train(args, parser) -> int:
    model_cfg, data_cfg = _train_config(args, parser)
    out = _out_dir(args, "train")
    tc = TR.TrainConfig(steps=args.steps, batch_size=args.batch_size, learning_rate=args.lr,
                        seed=args.seed, checkpoint_every=args.checkpoint_every,
                        zero_actions=args.zero_actions)
    result = TR.train_loop(model_cfg, data_cfg, tc, out)
    artifacts = [out / "metrics.jsonl"] + [Path(p) for p in result.checkpoints]
    config = {"model": model_cfg.to_dict(), "data": _config_dict(data_cfg),
              "train": _config_dict(tc)}
    _write_manifest(out, args, TRAIN_FLAGS, config, args.seed, artifacts,
                    diagnostics=[out / "timing.jsonl"])
    summary = f"trained {args.steps} steps"
    if result.metrics:
        summary += f"; final loss {result.metrics[-1]['loss_nats_per_frame']:.4f} nats/frame"
    print(f"{summary}; checkpoint {out / 'checkpoint.vpnk'}")
    return EXIT_OK


def cmd_eval(args, parser) -> int:
    ck, ds, config, params, data = _load_run(args.checkpoint, args.dataset)
    out = _out_dir(args, "eval")
    if len(data) == 0:
        raise CliError(f"dataset {ds} is empty", EXIT_ARTIFACT)
    report = TR.eval_loop(config, params, data).to_dict()
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, args, EVAL_FLAGS, {"model": config.to_dict()}, None, [path], [ck, ds])
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _gray(frame: np.ndarray) -> np.ndarray:
    # PGM holds one channel; color frames are exported as their channel mean
    f = np.asarray(frame)
    if f.ndim == 3 and f.shape[-1] > 1:
        return np.rint(f.mean(axis=-1)).astype(np.uint8)
    return f.reshape(f.shape[0], f.shape[1]).astype(np.uint8)


def _strip(frames) -> np.ndarray:
    return np.concatenate([_gray(f) for f in frames], axis=1)


def cmd_sample(args, parser) -> int:
    if args.num_sequences < 1 or args.num_continuations < 1:
        parser.error("--num-sequences and --num-continuations must be >= 1")
    ck, ds, config, params, data = _load_run(args.checkpoint, args.dataset)
    out = _out_dir(args, "sample")
    rng = np.random.default_rng(args.seed)
    ctx = config.context_frames
    cond_all = data.cond(ctx)
    index, artifacts = [], []
    for s in range(min(args.num_sequences, len(data))):
        video = data.videos[s]
        cond = None if cond_all is None else cond_all[s]
        for k in range(args.num_continuations):
            gen, logprob = M.sample_video(video[:ctx], cond, config, params,
                                          config.predicted_frames, rng)
            top = _strip(list(video[:ctx]) + list(gen))
            bottom = _strip(list(video))
            path = out / f"seq{s:03d}_cont{k}.pgm"
            D.write_pgm(path, np.concatenate([top, bottom], axis=0))
            artifacts.append(path)
            index.append({"sequence": s, "continuation": k, "file": path.name,
                          "context_frames": ctx, "generated_frames": int(len(gen)),
                          "log_prob": float(logprob)})
    idx_path = out / "index.json"
    idx_path.write_text(json.dumps({"rows": ["context + sample", "context + truth"],
                                    "entries": index}, indent=2) + "\n")
    artifacts.append(idx_path)
    _write_manifest(out, args, SAMPLE_FLAGS, {"model": config.to_dict()}, args.seed,
                    artifacts, [ck, ds])
    print(f"wrote {len(index)} sample strips to {out}")
    return EXIT_OK


def cmd_probe(args, parser) -> int:
    if args.size < 2:
        parser.error("--size must be >= 2")
    chosen = [args.causality, args.baseline_independence, args.receptive_field,
              args.gradcheck, args.lower_bound]
    run_all = args.all or not any(chosen)
    results = []
    if run_all or args.causality:
        results.append(P.causality_probe(P.probe_config("vpn", size=args.size), args.seed))
    if run_all or args.baseline_independence:
        results.append(P.causality_probe(P.probe_config("baseline", size=args.size), args.seed))
    if run_all or args.receptive_field:
        modes = {"on": [True], "off": [False], "both": [True, False]}[args.dilation]
        results += [P.receptive_field_probe(d, seed=args.seed) for d in modes]
    if run_all or args.gradcheck:
        results += P.gradcheck_suite(args.seed)
    if run_all or args.lower_bound:
        results.append(P.lower_bound_probe())
    out = _out_dir(args, "probe")
    path = out / "probe_report.json"
    report = [{"name": r.name, "passed": r.passed, "measured": r.measured} for r in results]
    path.write_text(json.dumps(report, indent=2, default=str) + "\n")
    _write_manifest(out, args, PROBE_FLAGS, {}, args.seed, [path])
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} probe(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_PROBE
    return EXIT_OK


def cmd_replay(args, parser) -> int:
    mpath = _input(args.manifest, "manifest")
    try:
        manifest = json.loads(mpath.read_text())
        argv, expected = list(manifest["argv"]), manifest["artifacts"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise CliError(f"malformed manifest {mpath}: {e}", EXIT_ARTIFACT) from None
    for path, digest in manifest.get("inputs", {}).items():
        p = Path(path)
        if not p.is_file() or _sha256(p) != digest:
            raise CliError(f"input {path} is missing or changed since the recorded run",
                           EXIT_ARTIFACT)
    out = Path(args.out) if args.out else mpath.parent / "replay"
    code = main(argv + ["--out", str(out)])
    if code != EXIT_OK and manifest["command"] != "probe":
        return code
    mismatched = []
    for rel, digest in sorted(expected.items()):
        p = out / rel
        if not p.is_file() or _sha256(p) != digest:
            mismatched.append(rel)
    if mismatched:
        print(f"replay differs in {len(mismatched)} artifact(s): {', '.join(mismatched)}",
              file=sys.stderr)
        return EXIT_ARTIFACT
    print(f"replay reproduced {len(expected)} artifact(s) bit-for-bit in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

GEN_DATA_FLAGS = [("--preset", "preset", "value"), ("--seed", "seed", "value"),
                  ("--count", "count", "value"), ("--export-pgm", "export_pgm", "value")]
TRAIN_FLAGS = [("--preset", "preset", "value"), ("--model", "model", "value"),
               ("--block", "block", "value"), ("--dilation", "dilation", "value"),
               ("--steps", "steps", "value"), ("--batch-size", "batch_size", "value"),
               ("--lr", "lr", "value"), ("--seed", "seed", "value"),
               ("--checkpoint-every", "checkpoint_every", "value"),
               ("--zero-actions", "zero_actions", "switch")]
EVAL_FLAGS = [("--checkpoint", "checkpoint", "path"), ("--dataset", "dataset", "path")]
SAMPLE_FLAGS = EVAL_FLAGS + [("--num-sequences", "num_sequences", "value"),
                             ("--num-continuations", "num_continuations", "value"),
                             ("--seed", "seed", "value")]
PROBE_FLAGS = [("--causality", "causality", "switch"),
               ("--baseline-independence", "baseline_independence", "switch"),
               ("--receptive-field", "receptive_field", "switch"),
               ("--gradcheck", "gradcheck", "switch"), ("--lower-bound", "lower_bound", "switch"),
               ("--all", "all", "switch"), ("--size", "size", "value"),
               ("--dilation", "dilation", "value"), ("--seed", "seed", "value")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vpnet", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"vpnet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = {}

    def add_out(p):
        parser.subcommands[p.prog.split()[-1]] = p
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/<command>)")

    p = sub.add_parser("gen-data", help="materialize a fixed dataset as a VSEQ file")
    p.add_argument("--preset", choices=sorted(DATA_PRESETS), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--export-pgm", type=int, default=0, metavar="K",
                   help="also write the first K frames of sequence 0 as PGM")
    add_out(p)

    p = sub.add_parser("train", help="train a model on freshly generated sequences")
    p.add_argument("--preset", choices=sorted(DATA_PRESETS), default="desk")
    p.add_argument("--model", choices=["vpn", "baseline"], default="vpn")
    p.add_argument("--block", choices=["rmb", "relu"], default="rmb")
    p.add_argument("--dilation", choices=["on", "off"], default="on")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--zero-actions", action="store_true",
                   help="train with every action replaced by zeros")
    add_out(p)

    p = sub.add_parser("eval", help="teacher-forced nats/frame of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    add_out(p)

    p = sub.add_parser("sample", help="sample continuations as PGM strips")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--num-sequences", type=int, default=2)
    p.add_argument("--num-continuations", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    add_out(p)

    p = sub.add_parser("probe", help="run diagnostic probes on a random model")
    p.add_argument("--causality", action="store_true",
                   help="no logit depends on a later pixel")
    p.add_argument("--baseline-independence", action="store_true",
                   help="baseline logits ignore the frame being predicted")
    p.add_argument("--receptive-field", action="store_true",
                   help="encoder gradient footprint equals the tap derivation")
    p.add_argument("--gradcheck", action="store_true",
                   help="finite-difference checks for every layer")
    p.add_argument("--lower-bound", action="store_true",
                   help="H(z, z) of a flat 0.5 frame against 64*64*ln 2")
    p.add_argument("--all", action="store_true", help="run every probe (default)")
    p.add_argument("--size", type=int, default=6, help="frame size for causality probes")
    p.add_argument("--dilation", choices=["on", "off", "both"], default="both")
    p.add_argument("--seed", type=int, default=0)
    add_out(p)

    p = sub.add_parser("replay", help="rerun a command from its manifest and compare artifacts")
    p.add_argument("manifest")
    add_out(p)
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "sample": cmd_sample, "probe": cmd_probe, "replay": cmd_replay}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, parser.subcommands[args.command])
    except SystemExit as e:
        return int(e.code or 0)
    except CliError as e:
        print(f"vpnet {args.command}: {e}", file=sys.stderr)
        return e.code
    except TR.ConfigMismatch as e:
        print(f"vpnet {args.command}: {e}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
