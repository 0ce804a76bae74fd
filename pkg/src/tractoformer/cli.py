"""``tractoformer`` command line: phantom, fit-sh, train, track, score, attn-dump, ablate.

Experiment parameters live in flat ``key = value`` files with ``model.``,
``train.``, ``track.`` and ``sh.`` prefixes; one file can drive every
subcommand. Each invocation writes a JSON run manifest next to its output
(``<out>.manifest.json``, or ``manifest.json`` inside an output directory).

Exit status: 0 on success, 1 when the pipeline raises, 2 for usage errors
and missing input files.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import check_known, read_kv, section
from .errors import InvalidArgument, TractoError
from .metrics import ScoreReport, score_tractogram
from .model import ModelConfig, dump_attention, forward, load_checkpoint, save_checkpoint
from .phantom import load_config, load_ground_truth, make_phantom, save_phantom
from .shcore import GradientScheme, Volume, fit_sh, read_volume, write_volume
from .streamlines import build_dataset, read_tracts, write_tracts
from .tracker import TrackConfig, track, write_histogram
from .train import TrainConfig, fit, write_loss_curve

log = logging.getLogger("tractoformer")

VARIANTS = {"baseline": "baseline_mlp", "context": "context_only", "full": "full"}
WEIGHTINGS = {"uniform": "uniform", "softmax": "softmax_fraction", "invfreq": "inverse_frequency"}
# (row name, variant, weighting) — the ablation ladder, in report order
ABLATION_ROWS = (
    ("baseline", "baseline_mlp", "uniform"),
    ("context", "context_only", "uniform"),
    ("full", "full", "uniform"),
    ("full+weighted", "full", "inverse_frequency"),
)


@dataclass
class ShConfig:
    l_max: int = 6
    lambda_reg: float = 0.006


SECTIONS = ((ModelConfig, "model"), (TrainConfig, "train"), (TrackConfig, "track"), (ShConfig, "sh"))


class UsageError(Exception):
    """Bad flags or missing inputs: exit status 2."""


# -- manifest -----------------------------------------------------------------


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: list
    config_path: str | None = None
    params: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    duration_s: float = 0.0
    status: str = "ok"
    version: str = __version__

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = sha256(path)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def manifest_path(out: Path, is_dir: bool) -> Path:
    return out / "manifest.json" if is_dir else out.with_name(out.name + ".manifest.json")


# -- helpers ------------------------------------------------------------------


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_kv(args, man: RunManifest) -> dict:
    if not getattr(args, "config", None):
        return {}
    path = _existing(args.config, "config file")
    man.config_path = str(path)
    man.add_input(path)
    kv = read_kv(path)
    check_known(kv, *SECTIONS)
    return kv


def _mask(path: Path) -> tuple[np.ndarray, Volume]:
    vol = read_volume(path)
    return vol.data[..., 0] > 0.5, vol


def _phantom_sh(data_dir: Path, sh_cfg: ShConfig, man: RunManifest) -> Volume:
    """The phantom's SH volume: ``sh.vol`` when present, else fitted from ``dwi.vol``."""
    sh_path = data_dir / "sh.vol"
    if sh_path.exists():
        man.add_input(sh_path)
        return read_volume(sh_path)
    dwi_path = _existing(str(data_dir / "dwi.vol"), "phantom DWI")
    scheme_path = _existing(str(data_dir / "scheme.txt"), "gradient scheme")
    man.add_input(dwi_path)
    man.add_input(scheme_path)
    dwi = read_volume(dwi_path)
    coeffs = fit_sh(dwi.data, GradientScheme.load(scheme_path), sh_cfg.l_max, sh_cfg.lambda_reg)
    return Volume(dwi.grid, coeffs.astype(np.float32))


def _train_one(data_dir: Path, kv: dict, variant: str, weighting: str | None, man: RunManifest):
    sh_cfg = section(ShConfig, kv, "sh")
    mcfg = section(ModelConfig, kv, "model", variant=variant)
    tcfg = section(TrainConfig, kv, "train", weighting_mode=weighting)
    volume = _phantom_sh(data_dir, sh_cfg, man)
    if volume.n_channels != mcfg.in_channels:
        mcfg = mcfg.replace(in_channels=volume.n_channels)
    gt_path = _existing(str(data_dir / "gt.trx"), "ground-truth tractogram")
    man.add_input(gt_path)
    step = section(TrackConfig, kv, "track").step_size
    data = build_dataset(read_tracts(gt_path), volume, mcfg.block_size, step)
    log.info("training %s (%s weighting) on %d sequences", mcfg.variant, tcfg.weighting_mode, len(data))
    result = fit(data, mcfg, tcfg)
    man.params.update(
        {f"model.{k}": v for k, v in dataclasses.asdict(mcfg).items()}
        | {f"train.{k}": v for k, v in dataclasses.asdict(tcfg).items()}
        | {f"sh.{k}": v for k, v in dataclasses.asdict(sh_cfg).items()}
    )
    man.seeds["train.rng_seed"] = tcfg.rng_seed
    return result


def _track_and_score(params, volume: Volume, gt, tcfg: TrackConfig) -> tuple:
    res = track(params, volume, gt.wm_mask, tcfg, gt.grid)
    report = score_tractogram(res.tractogram, gt.gt, gt.rois, gt.grid, gt.names)
    return res, report


# -- subcommands --------------------------------------------------------------


def cmd_phantom(args, man: RunManifest) -> None:
    cfg_path = _existing(args.config, "phantom config")
    man.config_path = str(cfg_path)
    man.add_input(cfg_path)
    cfg = load_config(cfg_path)
    man.params = {"dims": list(cfg.dims), "voxel_size": list(cfg.voxel_size), "snr": cfg.snr, "s0": cfg.s0,
                  "bundles": [b.name for b in cfg.bundles]}
    man.seeds["rng_seed"] = cfg.rng_seed
    ph = make_phantom(cfg)
    out = Path(args.out)
    written = save_phantom(ph, out)
    copy = out / "phantom.cfg"
    copy.write_bytes(cfg_path.read_bytes())
    for p in written + [copy]:
        man.add_output(p)
    print(f"phantom: {len(ph.gt)} streamlines, {int(ph.wm_mask.sum())} white-matter voxels -> {out}")


def cmd_fit_sh(args, man: RunManifest) -> None:
    if args.lmax % 2 or not 0 <= args.lmax <= 8:
        raise UsageError(f"--lmax must be an even order in 0..8, got {args.lmax}")
    dwi_path = _existing(args.dwi, "DWI volume")
    scheme_path = _existing(args.scheme, "gradient scheme")
    man.add_input(dwi_path)
    man.add_input(scheme_path)
    man.params = {"l_max": args.lmax, "lambda_reg": args.lambda_reg}
    dwi = read_volume(dwi_path)
    coeffs = fit_sh(dwi.data, GradientScheme.load(scheme_path), args.lmax, args.lambda_reg)
    write_volume(args.out, Volume(dwi.grid, coeffs.astype(np.float32)))
    man.add_output(args.out)


def cmd_train(args, man: RunManifest) -> None:
    data_dir = _existing(args.data, "training data directory")
    kv = _load_kv(args, man)
    variant = VARIANTS[args.variant] if args.variant else None
    weighting = WEIGHTINGS[args.weighting] if args.weighting else None
    result = _train_one(data_dir, kv, variant, weighting, man)
    out = Path(args.out)
    save_checkpoint(result.params, out)
    best = out.with_name(out.name + ".best")
    save_checkpoint(result.best_params, best)
    curve = out.with_name(out.name + ".loss.csv")
    write_loss_curve(curve, result.losses)
    for p in (out, best, curve):
        man.add_output(p)
    print(f"final loss {result.losses[-1]:.6g} (best epoch {result.best_epoch})" if result.losses else "no epochs run")


def cmd_track(args, man: RunManifest) -> None:
    ckpt = _existing(args.model, "checkpoint")
    sh_path = _existing(args.sh, "SH volume")
    mask_path = _existing(args.mask, "mask volume")
    for p in (ckpt, sh_path, mask_path):
        man.add_input(p)
    kv = _load_kv(args, man)
    tcfg = section(TrackConfig, kv, "track")
    man.params = {f"track.{k}": v for k, v in dataclasses.asdict(tcfg).items()}
    man.seeds["track.rng_seed"] = tcfg.rng_seed
    params = load_checkpoint(ckpt)
    volume = read_volume(sh_path)
    mask, mvol = _mask(mask_path)
    if not mvol.grid.same_as(volume.grid):
        raise InvalidArgument("mask and SH volume grids differ")
    res = track(params, volume, mask, tcfg, volume.grid)
    write_tracts(args.out, res.tractogram)
    hist = Path(args.out).with_name(Path(args.out).name + ".stops.txt")
    write_histogram(hist, res.histogram)
    man.add_output(args.out)
    man.add_output(hist)
    print(f"{len(res.tractogram)} streamlines from {res.n_seeds} seeds")


def cmd_score(args, man: RunManifest) -> None:
    rec_path = _existing(args.rec, "tractogram")
    gt_dir = _existing(args.gt, "ground-truth directory")
    man.add_input(rec_path)
    for name in ("gt.trx", "bundles.txt"):
        man.add_input(_existing(str(gt_dir / name), "ground-truth file"))
    gt = load_ground_truth(gt_dir)
    report = score_tractogram(read_tracts(rec_path), gt.gt, gt.rois, gt.grid, gt.names)
    Path(args.out).write_text(report.to_csv())
    man.add_output(args.out)
    sys.stdout.write(report.to_table())


def _parse_ref(ref: str) -> tuple[Path, int]:
    path, sep, idx = ref.rpartition(":")
    if not sep or not idx.isdigit():
        raise UsageError(f"--streamline must look like FILE.trx:INDEX, got {ref!r}")
    return _existing(path, "tractogram"), int(idx)


def cmd_attn_dump(args, man: RunManifest) -> None:
    ckpt = _existing(args.model, "checkpoint")
    sh_path = _existing(args.sh, "SH volume")
    trx, index = _parse_ref(args.streamline)
    for p in (ckpt, sh_path, trx):
        man.add_input(p)
    man.params = {"layer": args.layer, "head": args.head, "streamline": index}
    params = load_checkpoint(ckpt)
    tract = read_tracts(trx)
    if not 0 <= index < len(tract):
        raise InvalidArgument(f"streamline index {index} out of range (0..{len(tract) - 1})")
    verts = tract[index].vertices[: params.config.block_size]
    patches, ok = read_volume(sh_path).neighborhoods(verts)
    if not ok.all():
        raise InvalidArgument("streamline leaves the volume; no neighbourhood for some vertices")
    trace = forward(params, patches.reshape(len(verts), -1))
    weights = dump_attention(trace, args.layer, args.head)
    with open(args.out, "w") as fh:
        fh.write("query,key,weight\n")
        for q in range(weights.shape[0]):
            for k in range(q + 1):
                fh.write(f"{q},{k},{weights[q, k]:.8g}\n")
    man.add_output(args.out)


def cmd_ablate(args, man: RunManifest) -> None:
    data_dir = _existing(args.data, "training data directory")
    eval_dir = _existing(args.eval, "evaluation directory") if args.eval else data_dir
    kv = _load_kv(args, man)
    tcfg = section(TrackConfig, kv, "track")
    sh_cfg = section(ShConfig, kv, "sh")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gt = load_ground_truth(eval_dir)
    volume = _phantom_sh(eval_dir, sh_cfg, man)
    man.seeds["track.rng_seed"] = tcfg.rng_seed
    reports = []
    for name, variant, weighting in ABLATION_ROWS:
        result = _train_one(data_dir, kv, variant, weighting, man)
        slug = name.replace("+", "_")
        ckpt = out / f"{slug}.ckpt"
        save_checkpoint(result.params, ckpt)
        _, report = _track_and_score(result.params, volume, gt, tcfg)
        (out / f"{slug}.csv").write_text(report.to_csv())
        man.add_output(ckpt)
        man.add_output(out / f"{slug}.csv")
        reports.append((name, report))
        log.info("%s: dice %.2f", name, report.dice)
    for key in [k for k in man.params if k.startswith(("model.variant", "train.weighting_mode"))]:
        del man.params[key]
    man.params.update({f"track.{k}": v for k, v in dataclasses.asdict(tcfg).items()})
    man.params["rows"] = [r[0] for r in ABLATION_ROWS]
    table = ablation_table(reports)
    (out / "ablation.csv").write_text(ablation_csv(reports))
    (out / "ablation.txt").write_text(table)
    man.add_output(out / "ablation.csv")
    man.add_output(out / "ablation.txt")
    sys.stdout.write(table)


def ablation_csv(reports: list[tuple[str, ScoreReport]]) -> str:
    lines = ["row," + ",".join(ScoreReport.COLUMNS[1:])]
    for name, rep in reports:
        lines.append(",".join([name] + rep.rows()[0][1:]))
    return "\n".join(lines) + "\n"


def ablation_table(reports: list[tuple[str, ScoreReport]]) -> str:
    rows = [["row", *ScoreReport.COLUMNS[1:]]] + [[name] + rep.rows()[0][1:] for name, rep in reports]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows) + "\n"


# -- entry point --------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tractoformer", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, help="cap BLAS threads (default: $TRACTOFORMER_THREADS)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="synthesize a phantom directory")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_phantom, out_is_dir=True)

    s = sub.add_parser("fit-sh", help="fit SH coefficients to a DWI volume")
    s.add_argument("--dwi", required=True)
    s.add_argument("--scheme", required=True)
    s.add_argument("--lmax", type=int, default=6)
    s.add_argument("--lambda", dest="lambda_reg", type=float, default=0.006)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_sh, out_is_dir=False)

    s = sub.add_parser("train", help="train a model on a phantom directory")
    s.add_argument("--data", required=True)
    s.add_argument("--variant", choices=sorted(VARIANTS))
    s.add_argument("--weighting", choices=sorted(WEIGHTINGS))
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_train, out_is_dir=False)

    s = sub.add_parser("track", help="propagate streamlines with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--sh", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_track, out_is_dir=False)

    s = sub.add_parser("score", help="score a tractogram against a phantom")
    s.add_argument("--rec", required=True)
    s.add_argument("--gt", required=True, help="phantom directory")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score, out_is_dir=False)

    s = sub.add_parser("attn-dump", help="dump one head's attention along a streamline")
    s.add_argument("--model", required=True)
    s.add_argument("--streamline", required=True, metavar="TRX:INDEX")
    s.add_argument("--sh", required=True, help="SH volume the features are sampled from")
    s.add_argument("--layer", type=int, required=True)
    s.add_argument("--head", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attn_dump, out_is_dir=False)

    s = sub.add_parser("ablate", help="train, track and score the four ablation rows")
    s.add_argument("--data", required=True, help="training phantom directory")
    s.add_argument("--eval", help="evaluation phantom directory (default: --data)")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_ablate, out_is_dir=True)
    return p


def _thread_limit(n: int | None):
    if n is None:
        env = os.environ.get("TRACTOFORMER_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise UsageError(f"TRACTOFORMER_THREADS must be an integer, got {env!r}") from None
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        limiter = _thread_limit(args.threads)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("usage: tractoformer [--threads N] {phantom,fit-sh,train,track,score,attn-dump,ablate} ...", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    man = RunManifest(command=["tractoformer", *argv])
    start = time.perf_counter()
    code = 0
    try:
        with limiter:
            args.func(args, man)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TractoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        man.status = f"error: {exc}"
        code = 1
    man.duration_s = round(time.perf_counter() - start, 3)
    out = Path(args.out)
    if not args.out_is_dir or out.is_dir():
        if out.parent.exists():
            man.write(manifest_path(out, args.out_is_dir))
    return code


if __name__ == "__main__":
    sys.exit(main())
