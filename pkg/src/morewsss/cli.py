"""Command-line front end: ``train``, ``eval``, ``dump-maps``, ``verify``.

Exit codes: 0 ok, 1 failed verification, 2 bad config or arguments,
3 non-finite loss, 4 unreadable or corrupt checkpoint, 5 output
directory locked by another run.
"""
from __future__ import annotations

import argparse
import contextlib
import fcntl
import logging
import sys
from pathlib import Path

import numpy as np

from . import cam, lir, plotting, pnm
from .autodiff import NonFiniteError
from .checkpoint import Checkpoint, CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config, parse_config
from .evaluation import EvalResult, evaluate, predict
from .synthdata import generate_sample
from .training import STREAM_HEADER, TrainState, forward, init_state, state_from_tensors, train, train_split, val_split

log = logging.getLogger("morewsss")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NONFINITE, EXIT_CHECKPOINT, EXIT_LOCKED = 0, 1, 2, 3, 4, 5
LOCK_NAME = ".lock"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@contextlib.contextmanager
def locked(out: Path):
    """Hold an exclusive advisory lock on ``out`` for the duration of a command."""
    out.mkdir(parents=True, exist_ok=True)
    fh = open(out / LOCK_NAME, "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise CliError(f"output directory {out} is in use by another run", EXIT_LOCKED) from None
        yield out
    finally:
        fh.close()


def _config(path: str | None, seed: int | None = None, base_text: str | None = None) -> RunConfig:
    try:
        if path is not None:
            cfg = load_config(path)
        elif base_text is not None:
            cfg = parse_config(base_text)
        else:
            cfg = RunConfig()
        return cfg if seed is None else cfg.replace(seed=seed)
    except ConfigError as exc:
        raise CliError(f"bad config: {exc}", EXIT_CONFIG) from None


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:06d}.more"


def _save_state(state: TrainState, cfg: RunConfig, out: Path) -> Path:
    path = out / checkpoint_name(state.step)
    save_checkpoint(Checkpoint(state.tensors(), state.step, cfg.seed, dump_config(cfg)), path)
    return path


def _load(path: str, config_path: str | None) -> tuple[RunConfig, TrainState]:
    try:
        ckpt = load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}", EXIT_CHECKPOINT) from None
    except CheckpointFormatError as exc:
        raise CliError(f"corrupt checkpoint {path}: {exc}", EXIT_CHECKPOINT) from None
    cfg = _config(config_path, base_text=ckpt.config_text)
    try:
        return cfg, state_from_tensors(cfg, ckpt.tensors, ckpt.step)
    except (KeyError, ValueError) as exc:
        raise CliError(f"checkpoint {path} does not fit the config: {exc}", EXIT_CHECKPOINT) from None


def write_reports(result: EvalResult, out: Path, prefix: str) -> None:
    (out / f"{prefix}_seed.csv").write_text(result.seed.to_csv())
    (out / f"{prefix}_mask.csv").write_text(result.mask.to_csv())
    (out / f"{prefix}_summary.csv").write_text(
        "key,value\n"
        f"classification_accuracy,{result.accuracy!r}\n"
        f"seed_miou,{result.seed.miou!r}\n"
        f"mask_miou,{result.mask.miou!r}\n")
    plotting.plot_iou({"LAM seed": result.seed, "decoder mask": result.mask}, out / f"{prefix}_iou.png")


def render_report(result: EvalResult) -> str:
    return (f"# seed: LAM pseudo labels\n{result.seed.to_csv()}"
            f"# mask: decoder predictions\n{result.mask.to_csv()}"
            f"# classification exact-match accuracy: {result.accuracy!r}\n")


def read_stream(path: str | Path) -> tuple[list[int], dict[str, list[float]]]:
    lines = Path(path).read_text().splitlines()
    names = lines[0].split(",")[1:]
    steps, cols = [], {n: [] for n in names}
    for line in lines[1:]:
        parts = line.split(",")
        steps.append(int(parts[0]))
        for n, v in zip(names, parts[1:]):
            cols[n].append(float(v))
    return steps, cols


# -- commands --------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args.config, args.seed)
    out = Path(args.out or cfg.out_dir)
    if args.out:
        cfg = cfg.replace(out_dir=str(out))
    with locked(out):
        (out / "config.txt").write_text(dump_config(cfg))
        samples, val = train_split(cfg), val_split(cfg)
        state = init_state(cfg)
        stream = open(out / "metrics.csv", "w")
        stream.write(STREAM_HEADER + "\n")

        def on_step(rep, st):
            stream.write(rep.stream_line() + "\n")
            if cfg.checkpoint_every and st.step % cfg.checkpoint_every == 0:
                _save_state(st, cfg, out)

        try:
            if cfg.steps == 0 or cfg.checkpoint_every == 0:
                _save_state(state, cfg, out)
            try:
                state, _ = train(cfg, samples, state, on_step)
            except (NonFiniteError, FloatingPointError) as exc:
                _save_state(state, cfg, out)
                raise CliError(f"training aborted: {exc}", EXIT_NONFINITE) from None
        finally:
            stream.close()
        if not (out / checkpoint_name(state.step)).exists():
            _save_state(state, cfg, out)
        result = evaluate(state.params, val, cfg)
        write_reports(result, out, "val")
        steps, cols = read_stream(out / "metrics.csv")
        if steps:
            plotting.plot_losses(steps, cols, out / "loss_curves.png")
        print(render_report(result), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, state = _load(args.checkpoint, args.config)
    result = evaluate(state.params, val_split(cfg), cfg)
    print(render_report(result), end="")
    if args.out:
        with locked(Path(args.out)) as out:
            write_reports(result, out, "eval")
    return EXIT_OK


def map_manifest(num_classes: int) -> list[str]:
    """Files written by ``dump-maps``, in write order."""
    per_class = [f"{kind}_c{c}.pgm" for kind in ("cam", "lam", "neighbors") for c in range(1, num_classes + 1)]
    return (["image.ppm", "gt.pgm"] + per_class +
            ["reliability.pgm", "confident.pgm", "uncertain.pgm", "selected.pgm", "pseudo.pgm",
             "overview.png", "manifest.txt"])


def neighbor_grid(neighbors: np.ndarray, num_patches: int, grid: tuple[int, int]) -> np.ndarray:
    """Rank (1 = strongest) of each patch in one head's neighbor list, 0 if not kept."""
    out = np.zeros(num_patches, dtype=np.int64)
    out[np.asarray(neighbors)] = np.arange(1, len(neighbors) + 1)
    return out.reshape(grid)


def dump_maps(params, cfg: RunConfig, sample_seed: int, out: Path) -> list[str]:
    sample = generate_sample(sample_seed, cfg.synth)
    images, labels = sample.image[None], sample.labels[None]
    grid, C = cfg.encoder.grid, cfg.num_classes
    pred = predict(params, images, labels, cfg)
    rel = cam.multi_threshold_filter(pred.cam, cfg.cam_low, cfg.cam_high)
    relations = lir.split_relations(rel)
    selected = lir.kernel_search(relations.confident, relations.uncertain, cfg.kernel_size, cfg.proportion)
    if pred.neighbors is None:
        neighbors = np.zeros((C, 0), dtype=np.int64)
    else:
        neighbors = pred.neighbors[0]

    pnm.write_ppm(out / "image.ppm", np.transpose(sample.image, (1, 2, 0)))
    pnm.write_pgm(out / "gt.pgm", sample.mask)
    for c in range(C):
        pnm.write_pgm(out / f"cam_c{c + 1}.pgm", pnm.to_gray(pred.cam.scores[0, ..., c]))
    for c in range(C):
        pnm.write_pgm(out / f"lam_c{c + 1}.pgm", pnm.to_gray(pred.lam.scores[0, ..., c]))
    for c in range(C):
        pnm.write_pgm(out / f"neighbors_c{c + 1}.pgm", neighbor_grid(neighbors[c], cfg.encoder.num_patches, grid))
    pnm.write_pgm(out / "reliability.pgm", rel.labels[0])
    pnm.write_pgm(out / "confident.pgm", relations.confident[0])
    pnm.write_pgm(out / "uncertain.pgm", relations.uncertain[0])
    pnm.write_pgm(out / "selected.pgm", selected.mask[0].astype(np.int64))
    pnm.write_pgm(out / "pseudo.pgm", pred.seed_mask[0])
    plotting.plot_maps(sample.image, {"ground truth": sample.mask, "CAM": pred.cam.scores[0],
                                      "LAM": pred.lam.scores[0], "reliability": rel.labels[0],
                                      "seed": pred.seed_mask[0], "decoder": pred.decoder_mask[0]},
                       C, out / "overview.png")
    names = map_manifest(C)
    (out / "manifest.txt").write_text("\n".join(names) + "\n")
    return names


def cmd_dump_maps(args) -> int:
    cfg, state = _load(args.checkpoint, args.config)
    out = Path(args.out or Path(cfg.out_dir) / "maps")
    seed = cfg.val_seed if args.seed is None else args.seed
    with locked(out):
        names = dump_maps(state.params, cfg, seed, out)
    print("\n".join(str(out / n) for n in names))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all
    cfg = _config(args.config, args.seed)
    results = run_all(fault=args.inject_fault, seed=cfg.seed)
    for r in results:
        print(r.line(), flush=True)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morewsss", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config and evaluate on the val split")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="output directory (default: out_dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score LAM seeds and decoder masks of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="default: the config stored in the checkpoint")
    p.add_argument("--out", help="also write CSV reports and a figure here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-maps", help="write CAM/LAM/mask images for one synthetic sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, help="sample seed (default: first val sample)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_maps)

    p = sub.add_parser("verify", help="run the oracle and gradient-check suite")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--inject-fault", choices=["grad"], help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
