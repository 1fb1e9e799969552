"""Command-line entry point.

Commands: make-dataset, pretrain, eval-retrieval, eval-classify, ablate,
verify. Each takes an optional config file of `section.key = value` lines
plus `--set` overrides; outputs land in run.out_dir ($MCP_OUT when unset)
next to a `resolved.cfg` echo that reproduces the run. Exit codes: 0 ok,
1 config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as dsets
from . import evaluate, model, train, verify
from .config import ConfigError, RunConfig, dump, expected_keys_help, load
from .seeding import derive_seed

COMMANDS = ("make-dataset", "pretrain", "eval-retrieval", "eval-classify",
            "ablate", "verify")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcp",
        description="Motion-contrastive self-supervised video pretraining "
                    "and evaluation, single-machine scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "make-dataset": "generate the synthetic corpus (train/test .mcpv)",
        "pretrain": "run joint self-supervised pretraining",
        "eval-retrieval": "k-NN retrieval accuracy of a checkpoint",
        "eval-classify": "fine-tuned classification accuracy of a checkpoint",
        "ablate": "re-run the gap/branch/view ablation grids",
        "verify": "fast invariant self-checks",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("config", nargs="?", default=None,
                       help="config file of section.key = value lines")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="section.key=value",
                       help="override a config key (applies after the file)")
        p.add_argument("--threads", type=int, default=None,
                       help="cap worker counts (does not affect results)")
        if name in ("eval-retrieval", "eval-classify"):
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint path (default: "
                                "OUT_DIR/checkpoint_final.mcpc)")
        if name == "eval-classify":
            p.add_argument("--scratch", action="store_true",
                           help="skip the checkpoint; fine-tune from random "
                                "init (no-pretraining baseline)")
        if name == "verify":
            p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    return parser


def _prepare(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(dump(cfg))
    return out


def _datasets(cfg: RunConfig, out: Path):
    """Load the corpus files if present, else generate them (bit-identical)."""
    train_path, test_path = out / "train.mcpv", out / "test.mcpv"
    if train_path.exists() and test_path.exists():
        return (dsets.load_dataset(train_path, "train"),
                dsets.load_dataset(test_path, "test"))
    return _generate(cfg)


def _generate(cfg: RunConfig):
    d = cfg.dataset
    train_store = dsets.generate_synthetic_dataset(
        d.num_classes, d.train_per_class, d.frames, d.size,
        derive_seed(cfg.seed, "dataset", "train"))
    test_store = dsets.generate_synthetic_dataset(
        d.num_classes, d.test_per_class, d.frames, d.size,
        derive_seed(cfg.seed, "dataset", "test"),
        id_offset=len(train_store), split="test")
    return train_store, test_store


def _cmd_make_dataset(cfg: RunConfig, out: Path, args) -> int:
    train_store, test_store = _generate(cfg)
    dsets.save_dataset(train_store, out / "train.mcpv")
    dsets.save_dataset(test_store, out / "test.mcpv")
    dsets.save_manifest(train_store, out / "train.manifest")
    dsets.save_manifest(test_store, out / "test.manifest")
    print(f"wrote {len(train_store)} train / {len(test_store)} test videos "
          f"to {out}")
    return 0


def _cmd_pretrain(cfg: RunConfig, out: Path, args) -> int:
    train_store, _ = _datasets(cfg, out)

    def report(epoch, lv):
        print(f"epoch {epoch:3d}  mip {lv.mip:.4f}  cip {lv.cip:.4f}  "
              f"total {lv.total:.4f}", flush=True)

    try:
        ckpt = train.pretrain(train_store, cfg.train, cfg.arch, out_dir=out,
                              progress=report)
    except train.TrainingDiverged as exc:
        model.save_params(exc.checkpoint.params, out / "checkpoint_last_good.mcpc")
        print(f"error: {exc} (last good checkpoint saved)", file=sys.stderr)
        return 2
    print(f"final loss {ckpt.history[-1].total:.4f}; "
          f"checkpoint at {out / 'checkpoint_final.mcpc'}")
    return 0


def _load_checkpoint(out: Path, args) -> model.ParameterStore:
    path = Path(args.checkpoint) if args.checkpoint else \
        out / "checkpoint_final.mcpc"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}; run `mcp pretrain` "
                                "first or pass --checkpoint")
    return model.load_params(path)


def _cmd_eval_retrieval(cfg: RunConfig, out: Path, args) -> int:
    train_store, test_store = _datasets(cfg, out)
    params = _load_checkpoint(out, args)
    bank = evaluate.extract_features(train_store, params, cfg.arch, cfg.eval,
                                     threads=cfg.threads)
    queries = evaluate.extract_features(test_store, params, cfg.arch, cfg.eval,
                                        threads=cfg.threads)
    metrics = evaluate.retrieval_accuracy(queries, bank, cfg.eval.ks)
    rows = ["k,accuracy"]
    for k in sorted(metrics.topk):
        rows.append(f"{k},{format(metrics.topk[k], '.6g')}")
        print(f"top-{k}: {metrics.topk[k]:.4f}")
    (out / "retrieval.csv").write_text("\n".join(rows) + "\n")
    return 0


def _cmd_eval_classify(cfg: RunConfig, out: Path, args) -> int:
    train_store, test_store = _datasets(cfg, out)
    pretrained = None if args.scratch else _load_checkpoint(out, args)
    try:
        metrics, _ = evaluate.finetune_classify(
            pretrained, train_store, test_store, cfg.eval, cfg.arch,
            seed=derive_seed(cfg.seed, "finetune"))
    except train.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    (out / "classify.csv").write_text(
        f"top1\n{format(metrics.classify_top1, '.6g')}\n")
    print(f"classification top-1: {metrics.classify_top1:.4f}"
          f"{' (from scratch)' if args.scratch else ''}")
    return 0


def _cmd_ablate(cfg: RunConfig, out: Path, args) -> int:
    train_store, test_store = _datasets(cfg, out)
    written = evaluate.ablate(
        train_store, test_store, cfg.train, cfg.eval, cfg.arch, cfg.seed, out,
        progress=lambda tag: print(f"ablate: {tag}", flush=True))
    print("wrote " + ", ".join(written))
    return 0


def _cmd_verify(cfg: RunConfig, out: Path, args) -> int:
    results = verify.run_checks(corrupt=args.corrupt)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


_HANDLERS = {
    "make-dataset": _cmd_make_dataset,
    "pretrain": _cmd_pretrain,
    "eval-retrieval": _cmd_eval_retrieval,
    "eval-classify": _cmd_eval_classify,
    "ablate": _cmd_ablate,
    "verify": _cmd_verify,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.config is None and args.command != "verify":
            raise ConfigError("missing config file (an empty file selects "
                              "every default)")
        cfg = load(args.config, args.overrides)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            cfg.threads = args.threads
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        print(expected_keys_help(), file=sys.stderr)
        return 1
    try:
        out = _prepare(cfg)
        return _HANDLERS[args.command](cfg, out, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract: exit 2
        print(f"runtime failure: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
