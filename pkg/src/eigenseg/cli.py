"""Command-line interface: ``eigenseg <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.  Metrics go to stdout as ``name=value`` lines, errors to
stderr.  ``NEF_THREADS`` caps BLAS threads (0 or unset = library default).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import (colorize, image_files, parse_config, read_feature_container, read_pgm,
                      write_pgm, write_ppm)
from .eigenmodel import EigenModel
from .errors import ConfigError, DataError, NumericError
from .neuralef import EIGENVALUE_CONVENTION, TrainConfig, estimate_eigenvalues, train
from .oracle import adjusted_rand_index
from .pipeline import (image_size, kmeans_labels, model_masks, model_patch_labels, oracle_labels,
                       render_masks)
from .segmentation import evaluate_labels, upsample_bilinear
from .synthetic import SceneSpec, write_synthetic

log = logging.getLogger("eigenseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


# -- helpers ------------------------------------------------------------------------

def _pair(text: str) -> tuple[int, int]:
    """'4' -> (4, 4); '4x6' -> (4, 6)."""
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected positive N or HxW, got {text!r}")
    return parts[0], parts[1]


def parse_dims(text: str, K: int) -> list[int]:
    """'0..15' (inclusive), '3' or '0,2,5'."""
    dims = []
    try:
        for part in text.split(","):
            if ".." in part:
                lo, hi = (int(v) for v in part.split(".."))
                dims.extend(range(lo, hi + 1))
            else:
                dims.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse dims {text!r}") from None
    if not dims or min(dims) < 0 or max(dims) >= K:
        raise ConfigError(f"dims {text!r} must select indices in [0, {K - 1}]")
    return dims


def _config_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("run configuration (overrides --config)")
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        if f.name == "beta":
            text = "derived from K: 0.08*256/K"
        elif f.name == "width":
            text = "0 = max(64, K)"
        else:
            text = str(default).lower() if isinstance(default, bool) else str(default)
        if isinstance(default, bool):
            g.add_argument(flag, dest=f.name, type=_bool, default=argparse.SUPPRESS,
                           help=f"(default: {text})")
        else:
            typ = float if f.name == "beta" or isinstance(default, float) else int
            g.add_argument(flag, dest=f.name, type=typ, default=argparse.SUPPRESS,
                           help=f"(default: {text})")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _load_config(args) -> TrainConfig:
    cfg = parse_config(args.config) if args.config else TrainConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig) if hasattr(args, f.name)}
    if "K" in overrides and "beta" not in overrides and not (args.config and _config_sets_beta(args.config)):
        overrides["beta"] = None
    return replace(cfg, **overrides) if overrides else cfg


def _config_sets_beta(path) -> bool:
    for line in Path(path).read_text().splitlines():
        key = line.split("#", 1)[0].split("=", 1)[0].strip()
        if key == "beta":
            return True
    return False


def _mask_name(i: int) -> str:
    return f"img_{i:04d}"


def _write_label_maps(out_dir, maps, colorized: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(maps):
        m = np.asarray(m)
        if m.max(initial=0) > 255:
            raise DataError(f"cluster id {int(m.max())} does not fit an 8-bit PGM")
        write_pgm(out / f"{_mask_name(i)}.pgm", m.astype(np.uint8))
        if colorized:
            write_ppm(out / f"{_mask_name(i)}.ppm", colorize(m))


def _read_masks(directory) -> list[np.ndarray]:
    return [read_pgm(p) for p in image_files(directory, ".pgm")]


def _emit(**metrics) -> None:
    for k, v in metrics.items():
        if isinstance(v, float):
            v = f"{v:.6f}"
        print(f"{k}={v}")


# -- subcommands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SceneSpec(n_images=args.n, height=args.height, width=args.width, patch_size=args.patch,
                     n_shapes=args.shapes, seed=args.seed)
    ds = write_synthetic(args.out, spec)
    _emit(images=len(ds.images), classes=ds.n_classes, features=str(Path(args.out) / "features.nefb"))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    fc = read_feature_container(args.features)
    model, report = train(fc.features, fc.pixel_planes, cfg)
    if not args.skip_eigenvalues:
        report.eigenvalues = estimate_eigenvalues(model, fc.features, fc.pixel_planes, cfg)
    model.save(args.out)
    if args.log:
        report.write(args.log)
    _emit(steps=report.steps, loss=report.loss[-1], constraint_dev=max(report.constraint_dev),
          degenerate_dims=report.degenerate[-1])
    if report.eigenvalues is not None:
        _emit(eigenvalue_max=float(report.eigenvalues.max()))
    return EXIT_OK


def cmd_infer(args) -> int:
    model = EigenModel.load(args.model)
    fc = read_feature_container(args.features)
    if args.patch_grid:
        if model.c != fc.channels:
            raise DataError(f"model expects {model.c} feature channels, container has {fc.channels}")
        maps = list(model_patch_labels(model, fc.features))
    else:
        maps = model_masks(model, fc, args.protocol, args.window, args.stride)
    _write_label_maps(args.out_masks, maps, args.colorize)
    _emit(images=len(maps), clusters_used=len(np.unique(np.concatenate([m.ravel() for m in maps]))))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.pred is None and (args.model is None or args.features is None):
        raise UsageError("eval needs --pred, or --model with --features")
    if args.gt is None and args.against is None:
        raise UsageError("eval needs --gt and/or --against")
    if args.pred is not None:
        preds = _read_masks(args.pred)
    else:
        preds = model_masks(EigenModel.load(args.model), read_feature_container(args.features),
                            args.protocol, args.window, args.stride)
    if args.gt is not None:
        gts = _read_masks(args.gt)
        if len(preds) != len(gts):
            raise DataError(f"{len(preds)} predicted masks vs {len(gts)} ground-truth masks")
        n_clusters = int(max(p.max() for p in preds)) + 1
        if args.n_classes:
            n_classes = args.n_classes
        else:
            valid = [g[g != args.ignore_index] if args.ignore_index is not None else g for g in gts]
            n_classes = int(max(v.max(initial=0) for v in valid)) + 1
        res = evaluate_labels(preds, gts, n_clusters, n_classes, args.match, args.ignore_index)
        for line in res.scores.lines():
            print(line)
        mapped = [res.mapping[p] for p in preds]
    if args.against is not None:
        other = _read_masks(args.against)
        if len(other) != len(preds):
            raise DataError(f"{len(preds)} predicted masks vs {len(other)} in --against")
        for a, b in zip(preds, other):
            if a.shape != b.shape:
                raise DataError(f"mask shape mismatch against --against: {a.shape} vs {b.shape}")
        flat_other = np.concatenate([o.ravel() for o in other])
        raw = adjusted_rand_index(np.concatenate([p.ravel() for p in preds]), flat_other)
        if args.gt is None:
            _emit(ARI=raw, ARI_raw=raw)
        else:
            _emit(ARI=adjusted_rand_index(np.concatenate([m.ravel() for m in mapped]), flat_other), ARI_raw=raw)
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = _load_config(args)
    fc = read_feature_container(args.features)
    n_eig = args.eigvecs or cfg.K
    n_clusters = args.n_clusters or n_eig
    res = oracle_labels(fc, cfg, n_eig, n_clusters, seed=cfg.seed)
    w = res.decomposition.eigenvalues
    sizes = np.bincount(res.labels.ravel(), minlength=n_clusters)
    lines = [f"# exact spectral clustering; eigenvalue convention: {EIGENVALUE_CONVENTION}",
             f"n={len(w)}", f"sweeps={res.decomposition.sweeps}", f"eigvecs={n_eig}",
             f"n_clusters={n_clusters}", "cluster_sizes=" + ",".join(str(s) for s in sizes)]
    lines += [f"eigenvalue_{j}={v:.12g}" for j, v in enumerate(w[:max(n_eig, args.dump)])]
    if args.report:
        Path(args.report).write_text("\n".join(lines) + "\n")
    if args.out_masks:
        maps = res.labels if args.patch_grid else render_masks(res.labels, n_clusters, image_size(fc))
        _write_label_maps(args.out_masks, maps)
    _emit(n=len(w), sweeps=res.decomposition.sweeps, eigenvalue_0=float(w[0]),
          eigenvalue_last_kept=float(w[n_eig - 1]))
    return EXIT_OK


def cmd_kmeans(args) -> int:
    fc = read_feature_container(args.features)
    target = read_feature_container(args.predict_features) if args.predict_features else fc
    if args.prehead:
        if not args.model:
            raise UsageError("--prehead needs --model")
        model = EigenModel.load(args.model)
        fit_x, pred_x = model.forward_prehead(fc.features), model.forward_prehead(target.features)
    else:
        fit_x, pred_x = fc.features, target.features
    labels = kmeans_labels(fit_x, args.k, args.seed, pred_x)
    maps = labels if args.patch_grid else render_masks(labels, args.k, image_size(target))
    _write_label_maps(args.out, maps)
    _emit(images=len(maps), clusters_used=len(np.unique(labels)))
    return EXIT_OK


def cmd_eigmap(args) -> int:
    model = EigenModel.load(args.model)
    fc = read_feature_container(args.features)
    if model.c != fc.channels:
        raise DataError(f"model expects {model.c} feature channels, container has {fc.channels}")
    dims = parse_dims(args.dims, model.K)
    H, W = image_size(fc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logits = model.forward_infer(fc.features)
    for i, lg in enumerate(logits):
        up = upsample_bilinear(lg[..., dims], H, W)
        for j, d in enumerate(dims):
            m = up[..., j]
            lo, hi = m.min(), m.max()
            unit = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
            write_pgm(out / f"{_mask_name(i)}_dim{d:03d}.pgm", np.round(unit * 255).astype(np.uint8))
    _emit(images=len(logits), dims=len(dims))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eigenseg", description=__doc__, formatter_class=_Formatter, allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=_Formatter,
                            allow_abbrev=False)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "write a synthetic scene dataset (PPM images, PGM masks, NEFB features)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--n", type=int, default=20, help="number of images")
    sp.add_argument("--seed", type=int, default=0, help="scene generator seed")
    sp.add_argument("--height", type=int, default=64, help="image height in pixels")
    sp.add_argument("--width", type=int, default=64, help="image width in pixels")
    sp.add_argument("--patch", type=int, default=8, help="patch size P")
    sp.add_argument("--shapes", type=int, default=3, help="shapes per image")

    sp = add("train", cmd_train, "train the neural eigenfunctions on a feature container")
    sp.add_argument("--features", required=True, help="NEFB feature container")
    sp.add_argument("--config", default=None, help="run configuration file (key = value)")
    sp.add_argument("--out", required=True, help="output NEFM model file")
    sp.add_argument("--log", default=None, help="training log (per-step loss, lr, tau, R_jj)")
    sp.add_argument("--skip-eigenvalues", action="store_true",
                    help="skip the full-dataset eigenvalue estimate after training")
    _config_flags(sp)

    sp = add("infer", cmd_infer, "write cluster-id masks for every image")
    sp.add_argument("--model", required=True, help="NEFM model")
    sp.add_argument("--features", required=True, help="NEFB feature container")
    sp.add_argument("--out-masks", required=True, help="output directory of PGM masks")
    sp.add_argument("--colorize", action="store_true", help="also write colorized PPM masks")
    sp.add_argument("--patch-grid", action="store_true", help="write labels at feature resolution")
    _protocol_flags(sp)

    sp = add("eval", cmd_eval, "score predicted masks against ground truth and/or another labeling")
    sp.add_argument("--pred", default=None, help="directory of predicted PGM masks")
    sp.add_argument("--model", default=None, help="predict with this model instead of --pred")
    sp.add_argument("--features", default=None, help="features for --model")
    sp.add_argument("--gt", default=None, help="directory of ground-truth PGM masks")
    sp.add_argument("--match", choices=("hungarian", "vote"), default="hungarian",
                    help="cluster-to-class matching over the whole set")
    sp.add_argument("--ignore-index", type=int, default=None, help="gt label excluded from scoring")
    sp.add_argument("--n-classes", type=int, default=0, help="0 = 1 + largest gt label")
    sp.add_argument("--against", default=None,
                    help="directory of masks to compare with; prints ARI (class-mapped when --gt is given) and ARI_raw")
    _protocol_flags(sp)

    sp = add("oracle", cmd_oracle, "exact spectral clustering of the global kernel with eigenvalue dump")
    sp.add_argument("--features", required=True, help="NEFB feature container")
    sp.add_argument("--config", default=None, help="run configuration file")
    sp.add_argument("--report", default=None, help="report file (eigenvalues, cluster sizes)")
    sp.add_argument("--eigvecs", type=int, default=0, help="eigenvectors to embed with (0 = K)")
    sp.add_argument("--n-clusters", type=int, default=0, help="0 = eigvecs")
    sp.add_argument("--dump", type=int, default=0, help="eigenvalues to dump beyond eigvecs")
    sp.add_argument("--out-masks", default=None, help="directory for the cluster masks")
    sp.add_argument("--patch-grid", action="store_true", help="write labels at feature resolution")
    _config_flags(sp)

    sp = add("kmeans", cmd_kmeans, "K-means baseline on raw (or pre-head) features")
    sp.add_argument("--features", required=True, help="features to fit on")
    sp.add_argument("--predict-features", default=None, help="features to label (default: --features)")
    sp.add_argument("--prehead", action="store_true", help="cluster the model's pre-head features")
    sp.add_argument("--model", default=None, help="NEFM model for --prehead")
    sp.add_argument("--k", type=int, default=256, help="number of clusters")
    sp.add_argument("--seed", type=int, default=0, help="k-means++ seed")
    sp.add_argument("--out", required=True, help="output directory of PGM masks")
    sp.add_argument("--patch-grid", action="store_true", help="write labels at feature resolution")

    sp = add("eigmap", cmd_eigmap, "per-dimension eigenfunction heatmaps, min-max scaled to [0, 255]")
    sp.add_argument("--model", required=True, help="NEFM model")
    sp.add_argument("--features", required=True, help="NEFB feature container")
    sp.add_argument("--dims", default="0..15", help="'a..b' (inclusive), 'i' or 'i,j,k'")
    sp.add_argument("--out", required=True, help="output directory of PGM heatmaps")
    return p


def _protocol_flags(sp):
    sp.add_argument("--protocol", choices=("crop", "window"), default="crop",
                    help="whole feature map, or averaged sliding windows")
    sp.add_argument("--window", type=_pair, default=None, help="window size in patches (N or HxW)")
    sp.add_argument("--stride", type=_pair, default=None, help="window stride (None = half the window)")


def _thread_limit():
    raw = os.environ.get("NEF_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"NEF_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"NEF_THREADS must be >= 0, got {n}")
    if n == 0:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        limiter = _thread_limit()
        try:
            return args.fn(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())
