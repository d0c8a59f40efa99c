"""Command line front end: train, eval, extract, gradcheck, synth.

Configuration comes from a JSON file (--config) overridden by explicit flags;
every run writes the resolved configuration next to its outputs. Exit codes:
0 success, 1 usage error, 2 data or checkpoint error, 3 failed check.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .datapipe import (
    DatasetError,
    by_identity,
    identity_labels,
    load_dataset,
    make_split,
    pair_stream,
    preprocess_dataset,
    synth_dataset,
    write_split_files,
)
from .evalkit import (
    REPORT_RANKS,
    compute_cmc,
    cross_dataset_eval,
    emit_report,
)
from .gradcheck import run_gradcheck
from .model import (
    CheckpointError,
    LossConfig,
    init_params,
    load_checkpoint,
    rnn_input_dim,
    save_checkpoint,
    sgd_step,
    total_loss,
)
from .tensor import Graph

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


@dataclass
class RunConfig:
    data_root: str | None = None
    out: str = "runs/run"
    seed: int = 0
    trials: int = 10
    trial: int = 0
    k: int = 16
    margin: float = 3.0
    feature_dim: int = 128
    lr: float = 0.001
    epochs: int = 700
    variant: str = "astpn"
    rnn_output: str = "pre_tanh"
    use_identity_loss: bool = True
    spp_bins: list = None
    split_mode: str = "half"
    save_every: int = 0
    lr_decay_every: int = 0
    lr_decay_factor: float = 1.0
    single_shot: bool = False
    cross_dataset: str | None = None
    fraction: float = 0.5
    checkpoint: str | None = None

    def __post_init__(self):
        if self.spp_bins is None:
            self.spp_bins = [[8, 8], [4, 4], [2, 2], [1, 1]]

    def loss_config(self) -> LossConfig:
        return LossConfig(
            margin=self.margin,
            variant=self.variant,
            use_identity_loss=self.use_identity_loss,
            rnn_output=self.rnn_output,
            spp_bins=tuple(tuple(b) for b in self.spp_bins),
        )


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"config file {config_path}: {exc}") from exc
        known = {f.name for f in fields(RunConfig)}
        unknown = set(loaded) - known
        if unknown:
            raise DatasetError(f"config file {config_path}: unknown keys {sorted(unknown)}")
        values.update(loaded)
    for f in fields(RunConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            values[f.name] = flag_value
    return RunConfig(**values)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def write_resolved_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")


def _load_index(cfg: RunConfig):
    if not cfg.data_root:
        raise DatasetError("no dataset root given (set --data-root or the config file)")
    samples = preprocess_dataset(load_dataset(cfg.data_root))
    if not samples:
        raise DatasetError(f"dataset root {cfg.data_root} holds no sequences")
    index = by_identity(samples)
    usable = sorted(pid for pid, cams in index.items() if len(cams) >= 2)
    if not usable:
        raise DatasetError(f"{cfg.data_root}: no identities with two cameras")
    return index, usable


def _frame_hw_after_crop(index) -> tuple[int, int]:
    sample = next(iter(next(iter(index.values())).values()))
    h, w = sample.frame_hw
    return h - 8, w - 8


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out_dir = Path(cfg.out)
    write_resolved_config(cfg, out_dir)
    index, usable = _load_index(cfg)
    split = make_split(usable, cfg.seed, cfg.trial, cfg.split_mode)
    write_split_files(split, out_dir / "splits")

    loss_cfg = cfg.loss_config()
    params = init_params(cfg.seed, len(split.train), loss_cfg,
                         feature_dim=cfg.feature_dim,
                         frame_hw=_frame_hw_after_crop(index))
    stream = pair_stream(index, split.train, cfg.k, seed=cfg.seed)
    pairs_per_epoch = 2 * len(split.train)

    lr = cfg.lr
    log_lines = ["epoch,mean_loss"]
    for epoch in range(cfg.epochs):
        if cfg.lr_decay_every > 0 and epoch > 0 and epoch % cfg.lr_decay_every == 0:
            lr *= cfg.lr_decay_factor
        total = 0.0
        for _ in range(pairs_per_epoch):
            pair = next(stream)
            graph = Graph()
            loss = total_loss(graph, pair, params, loss_cfg)
            graph.backward(loss)
            sgd_step(params, lr)
            total += loss.item()
        mean_loss = total / pairs_per_epoch
        log_lines.append(f"{epoch},{mean_loss:.17g}")
        print(f"epoch {epoch}: mean loss {mean_loss:.6f}")
        if cfg.save_every > 0 and (epoch + 1) % cfg.save_every == 0:
            save_checkpoint(params, out_dir / f"checkpoint_epoch_{epoch + 1}.astp")

    (out_dir / "train_log.csv").write_text("\n".join(log_lines) + "\n")
    save_checkpoint(params, out_dir / "checkpoint.astp")
    print(f"saved {out_dir / 'checkpoint.astp'}")
    return EXIT_OK


def _check_params_match(params, cfg: RunConfig, frame_hw) -> None:
    loss_cfg = cfg.loss_config()
    expected_in = rnn_input_dim(loss_cfg, frame_hw)
    if params.rnn.u_in.shape != (cfg.feature_dim, expected_in):
        raise CheckpointError(
            f"rnn.u_in has shape {params.rnn.u_in.shape} but the configuration "
            f"implies {(cfg.feature_dim, expected_in)}"
        )


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not cfg.checkpoint:
        raise DatasetError("eval needs --checkpoint")
    out_dir = Path(cfg.out)
    write_resolved_config(cfg, out_dir)
    loss_cfg = cfg.loss_config()
    eval_k = 1 if cfg.single_shot else None
    stamp = time.strftime("%Y%m%d-%H%M%S")
    meta = {"config_hash": config_hash(cfg), "seed": cfg.seed}

    if cfg.cross_dataset:
        curve = cross_dataset_eval(cfg.checkpoint, cfg.cross_dataset, loss_cfg,
                                   fraction=cfg.fraction, seed=cfg.seed, eval_k=eval_k)
        curves = [curve]
        meta.update(curve.meta)
        dataset_name = Path(cfg.cross_dataset).name or "dataset"
    else:
        params = load_checkpoint(cfg.checkpoint)
        index, usable = _load_index(cfg)
        _check_params_match(params, cfg, _frame_hw_after_crop(index))
        curves = []
        for trial in range(cfg.trials):
            split = make_split(usable, cfg.seed, trial, cfg.split_mode)
            curves.append(compute_cmc(index, split.test, params, loss_cfg,
                                      eval_k=eval_k, seed=cfg.seed,
                                      meta={"trial": trial}))
        dataset_name = Path(cfg.data_root).name or "dataset"

    base = out_dir / f"cmc_{dataset_name}_{cfg.variant}_{stamp}"
    csv_path, json_path = emit_report(curves, base, meta=meta)
    table = np.stack([c.values for c in curves])
    means = table.mean(axis=0)
    for r in REPORT_RANKS:
        print(f"rank-{r}: {means[min(r, len(means)) - 1]:.4f}")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_extract(args: argparse.Namespace) -> int:
    from .model import extract_feature
    from .datapipe import augment

    cfg = resolve_config(args)
    if not cfg.checkpoint:
        raise DatasetError("extract needs --checkpoint")
    params = load_checkpoint(cfg.checkpoint)
    index, usable = _load_index(cfg)
    _check_params_match(params, cfg, _frame_hw_after_crop(index))
    loss_cfg = cfg.loss_config()
    out_dir = Path(cfg.out)
    write_resolved_config(cfg, out_dir)
    lines = ["person_id,camera_id," + ",".join(f"f{i}" for i in range(cfg.feature_dim))]
    for pid in usable:
        for cam in sorted(index[pid]):
            seq = augment(index[pid][cam], "test")
            feat = extract_feature(seq, params, loss_cfg)
            lines.append(f"{pid},{cam}," + ",".join(f"{v:.17g}" for v in feat))
    path = out_dir / "features.csv"
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path} ({len(lines) - 1} sequences)")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = run_gradcheck(seed=args.seed if args.seed is not None else 0,
                           samples_per_tensor=args.samples,
                           tol=args.tol,
                           corrupt=args.corrupt)
    for name, err in report.worst.items():
        status = "ok" if err < report.tol else "FAIL"
        print(f"{name:20s} max rel err {err:.3e} over {report.checked[name]} elements [{status}]")
    if report.passed:
        print(f"gradcheck passed (worst {report.worst_overall:.3e} < {report.tol:g})")
        return EXIT_OK
    print(f"gradcheck FAILED (worst {report.worst_overall:.3e} >= {report.tol:g})")
    return EXIT_CHECK


def cmd_synth(args: argparse.Namespace) -> int:
    n_files = synth_dataset(
        args.root, n_ids=args.ids, n_cams=args.cams, frames_per_seq=args.frames,
        size=(args.height, args.width), seed=args.seed if args.seed is not None else 0,
        signal_frames=args.signal_frames,
    )
    print(f"wrote {n_files} frames for {args.ids} identities x {args.cams} cameras "
          f"under {args.root}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--trial", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--variant", choices=["astpn", "atpn_only", "aspn_only",
                                         "mean_pool", "max_pool"])
    p.add_argument("--rnn-output", dest="rnn_output", choices=["pre_tanh", "post_tanh"])
    p.add_argument("--use-identity-loss", dest="use_identity_loss",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--split-mode", dest="split_mode", choices=["half", "all"])
    p.add_argument("--save-every", dest="save_every", type=int)
    p.add_argument("--lr-decay-every", dest="lr_decay_every", type=int)
    p.add_argument("--lr-decay-factor", dest="lr_decay_factor", type=float)
    p.add_argument("--single-shot", dest="single_shot",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--cross-dataset", dest="cross_dataset")
    p.add_argument("--fraction", type=float)
    p.add_argument("--checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="astpn",
                     description="video sequence matcher: train, evaluate, inspect")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on a dataset split")
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint (CMC report)")
    _add_config_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_extract = sub.add_parser("extract", help="dump per-sequence features to CSV")
    _add_config_flags(p_extract)
    p_extract.set_defaults(func=cmd_extract)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--samples", type=int, default=24)
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.add_argument("--corrupt", help="tensor name whose gradient is perturbed")
    p_grad.set_defaults(func=cmd_gradcheck)

    p_synth = sub.add_parser("synth", help="generate a synthetic PPM dataset")
    p_synth.add_argument("root")
    p_synth.add_argument("--ids", type=int, default=8)
    p_synth.add_argument("--cams", type=int, default=2)
    p_synth.add_argument("--frames", type=int, default=16)
    p_synth.add_argument("--height", type=int, default=24)
    p_synth.add_argument("--width", type=int, default=16)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--signal-frames", dest="signal_frames", type=int)
    p_synth.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def run() -> None:
    raise SystemExit(main())
