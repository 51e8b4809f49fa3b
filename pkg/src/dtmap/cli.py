"""Command line interface: ``dtmap <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure. Outputs are written to temporary siblings and moved into
place only when the whole subcommand succeeds.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from contextlib import nullcontext
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    CvReport,
    ModelSpec,
    association_test,
    cluster_embeddings,
    cluster_mean_trajectories,
    evaluate_cv,
    load_clusters,
    save_association,
    save_clusters,
)
from .dtm import DtmConfig, DtmState, dtm_embed, embed_new, fit_dtm, predict_trajectory
from .embeddings import EmbeddingSet
from .fpca import FpcaModel, fit_fpca, fpca_embed_all
from .lmm import EMConfig, LmmModel, fit_lmm, lmm_embed
from .modelio import ModelFileError, load_model, save_model
from .spline_basis import build_basis, design_matrix
from .trajdata import DataError, SimConfig, load_dataset, save_dataset, save_truth, simulate

log = logging.getLogger("dtmap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class BasisOptions:
    d: int = 5
    degree: int = 2


@dataclass
class FpcaOptions:
    q: int = 2


@dataclass
class EvalOptions:
    mc_samples: int = 256


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str | None = None
    simulate: SimConfig = field(default_factory=SimConfig)
    basis: BasisOptions = field(default_factory=BasisOptions)
    em: EMConfig = field(default_factory=EMConfig)
    fpca: FpcaOptions = field(default_factory=FpcaOptions)
    dtm: DtmConfig = field(default_factory=DtmConfig)
    evaluate: EvalOptions = field(default_factory=EvalOptions)


def _build(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise UsageError(f"config section {where!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(obj) - set(known))
    if unknown:
        raise UsageError(f"unknown config key(s) in {where or 'top level'!r}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in obj.items():
        sub = known[name].default_factory
        if sub is not MISSING and is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = tuple(value) if name == "obs_count_law" else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config section {where or 'top level'!r}: {exc}") from exc


def load_run_config(path) -> RunConfig:
    """Parse a JSON run configuration; unknown keys are rejected."""
    if path is None:
        return RunConfig()
    try:
        with Path(path).open(encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc.msg}") from exc
    cfg = _build(RunConfig, obj, "")
    if cfg.output_dir is not None:
        cfg.output_dir = str(Path(path).parent.joinpath(cfg.output_dir).resolve())
    return cfg


# ---------------------------------------------------------------------------
# output handling


_UMASK = os.umask(0)
os.umask(_UMASK)


class Outputs:
    """Collects output paths; files appear at their final location only on commit."""

    def __init__(self, base: str | None = None):
        self.base = Path(base) if base else None
        self._pending: list[tuple[Path, Path]] = []

    def path(self, target) -> Path:
        target = Path(target)
        if self.base is not None and not target.is_absolute():
            target = self.base / target
        target = target.resolve()
        if not target.parent.is_dir():
            raise UsageError(f"output directory {target.parent} does not exist")
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
        os.close(fd)
        self._pending.append((Path(tmp), target))
        return Path(tmp)

    def commit(self) -> None:
        for tmp, target in self._pending:
            os.chmod(tmp, 0o666 & ~_UMASK)
            os.replace(tmp, target)
        self._pending.clear()

    def discard(self) -> None:
        for tmp, _ in self._pending:
            tmp.unlink(missing_ok=True)
        self._pending.clear()


def _parse_floats(text: str, what: str) -> np.ndarray:
    """Comma-separated numbers, or ``start:stop:count`` for an even grid."""
    try:
        if ":" in text:
            a, b, n = text.split(":")
            return np.linspace(float(a), float(b), int(n))
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError:
        raise UsageError(f"cannot parse {what} {text!r}") from None


def _load_data(path):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None


def _load_embeddings(path) -> EmbeddingSet:
    try:
        return EmbeddingSet.load(path)
    except FileNotFoundError:
        raise DataError(f"embeddings file not found: {path}") from None
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed embeddings file {path}: {exc}") from None


def _load_model(path):
    try:
        return load_model(path)
    except FileNotFoundError:
        raise DataError(f"model file not found: {path}") from None
    except ModelFileError as exc:
        raise DataError(str(exc)) from None


def _dtm_config(cfg: RunConfig, args) -> DtmConfig:
    return replace(cfg.dtm, seed=args.seed if args.seed is not None else cfg.seed)


def describe_dtm_config(c: DtmConfig) -> str:
    return (f"dtm config: batch={c.batch_size} epochs={c.epochs} lr0={c.lr0} p={c.p} q={c.q} "
            f"decay={c.decay} learn_hypers={str(c.learn_hypers).lower()} seed={c.seed}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, cfg: RunConfig, out: Outputs) -> None:
    seed = args.seed if args.seed is not None else cfg.seed
    ds, truth = simulate(cfg.simulate, seed)
    save_dataset(ds, out.path(args.out))
    if args.truth:
        save_truth(truth, out.path(args.truth))
    print(f"simulated {ds.m} subjects, {ds.n} observations")


def cmd_fit(args, cfg: RunConfig, out: Outputs) -> None:
    if args.model == "dtm":
        dcfg = _dtm_config(cfg, args)
        print(describe_dtm_config(dcfg))
        if args.show_config:
            return
    elif args.show_config:
        print(json.dumps(asdict(cfg.em)))
        return
    if not args.data or not args.out:
        raise UsageError("fit needs --data and --out")
    ds = _load_data(args.data)
    basis = build_basis(ds, cfg.basis.d, cfg.basis.degree)
    lmm = fit_lmm(ds, basis, cfg.em)
    if args.model == "lmm":
        model = lmm
    elif args.model == "fpca":
        model = fit_fpca(ds, basis, cfg.fpca.q, cfg.em, warm=lmm)
    else:
        model = fit_dtm(ds, dcfg, basis=basis, warm=lmm)
    save_model(model, out.path(args.out), meta={"data": str(args.data), "version": __version__})
    print(f"fitted {args.model} on {ds.m} subjects")


def _embed(model, ds) -> EmbeddingSet:
    if isinstance(model, LmmModel):
        return lmm_embed(model, ds)
    if isinstance(model, FpcaModel):
        return fpca_embed_all(model, ds)
    # subjects seen in training keep their fitted q(x_i); others are inferred with globals frozen
    trained = dtm_embed(model)
    known = {sid: i for i, sid in enumerate(trained.subject_ids)}
    means, covs = [], []
    for tr in ds:
        if tr.subject_id in known:
            i = known[tr.subject_id]
            means.append(trained.means[i])
            covs.append(trained.covs[i])
        else:
            g = embed_new(model, tr)
            means.append(g.mean)
            covs.append(g.cov)
    return EmbeddingSet(ds.subject_ids, np.array(means), np.array(covs), model_tag="dtm")


def cmd_embed(args, cfg: RunConfig, out: Outputs) -> None:
    model = _load_model(args.model)
    ds = _load_data(args.data)
    es = _embed(model, ds)
    es.save(out.path(args.out))
    print(f"embedded {len(es)} subjects in {es.q} dimensions")


def cmd_predict(args, cfg: RunConfig, out: Outputs) -> None:
    model = _load_model(args.model)
    x = _parse_floats(args.x, "--x")
    times = _parse_floats(args.times, "--times")
    if isinstance(model, DtmState):
        if x.size != model.q:
            raise UsageError(f"--x needs {model.q} values")
        pred = predict_trajectory(model, x, times)
        mean, sd = pred.mean, pred.sd
    else:
        B = design_matrix(model.basis, times).rows
        if isinstance(model, FpcaModel):
            if x.size != model.q:
                raise UsageError(f"--x needs {model.q} values")
            w = model.F @ x
        else:
            P = model.pca_basis
            if x.size != P.shape[1]:
                raise UsageError(f"--x needs {P.shape[1]} values")
            w = model.coef_mean + P @ x
        mean = model.mu + B @ w
        sd = np.full(times.size, np.sqrt(model.sigma2))
    with out.path(args.out).open("w", encoding="utf-8") as fh:
        fh.write("time,mean,sd\n")
        for t, mval, s in zip(times, mean, sd):
            fh.write(f"{float(t)!r},{float(mval)!r},{float(s)!r}\n")


def cmd_cluster(args, cfg: RunConfig, out: Outputs) -> None:
    es = _load_embeddings(args.embeddings)
    if not 1 <= args.k <= len(es):
        raise UsageError(f"--k must lie in [1, {len(es)}]")
    labels = cluster_embeddings(es, args.k)
    save_clusters(es.subject_ids, labels, out.path(args.out))
    sizes = np.bincount(labels)
    print(f"{args.k} clusters, sizes {sizes.tolist()}")


def cmd_evaluate(args, cfg: RunConfig, out: Outputs) -> None:
    ds = _load_data(args.data)
    seed = args.seed if args.seed is not None else cfg.seed
    kinds = [s.strip() for s in args.models.split(",") if s.strip()]
    try:
        specs = [ModelSpec(k, q=cfg.fpca.q if k == "fpca" else cfg.dtm.q, em=cfg.em, dtm=cfg.dtm)
                 for k in kinds]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not 2 <= args.folds <= ds.m:
        raise UsageError(f"--folds must lie in [2, {ds.m}]")
    mc = args.mc_samples or cfg.evaluate.mc_samples
    report: CvReport = evaluate_cv(ds, specs, args.folds, seed, mc, cfg.basis.d, cfg.basis.degree)
    report.save(out.path(args.out))
    for name, s in report.summary().items():
        print(f"{name}: subject LL {s['subject_ll_mean']:.3f} +/- {s['subject_ll_sd']:.3f}, "
              f"obs LL {s['obs_ll_mean']:.3f} +/- {s['obs_ll_sd']:.3f}")


def cmd_associate(args, cfg: RunConfig, out: Outputs) -> None:
    es = _load_embeddings(args.embeddings)
    ds = _load_data(args.outcomes)
    names = [args.outcome_col] if args.outcome_col else ds.outcome_names()
    if not names:
        raise DataError(f"{args.outcomes} has no outcome columns")
    seed = args.seed if args.seed is not None else cfg.seed
    results = {}
    for name in names:
        if name not in ds.outcome_names():
            raise DataError(f"outcome column {name!r} not found in {args.outcomes}")
        labels = {tr.subject_id: tr.outcomes[name] for tr in ds if name in tr.outcomes}
        results[name] = association_test(es, labels, args.permutations, seed)
        print(f"{name}: energy {results[name].statistic:.4g}, p = {results[name].p_value:.4g}")
    save_association(results, out.path(args.out))


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def render_svg(points: np.ndarray, labels: np.ndarray, size: int = 480, pad: int = 30) -> str:
    """Minimal scatter plot of the first two embedding dimensions, coloured by cluster."""
    xy = points[:, :2] if points.shape[1] >= 2 else np.column_stack([points[:, 0], np.zeros(len(points))])
    lo = xy.min(0)
    span = np.where(np.ptp(xy, 0) > 0, np.ptp(xy, 0), 1.0)
    px = pad + (xy - lo) / span * (size - 2 * pad)
    px[:, 1] = size - px[:, 1]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for (x, y), c in zip(px, labels):
        color = _PALETTE[int(c) % len(_PALETTE)]
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{color}" fill-opacity="0.8" '
                     f'data-cluster="{int(c)}"/>')
    for c in np.unique(labels):
        parts.append(f'<text x="{pad}" y="{pad // 2 + 12 * int(c) + 4}" font-size="10" '
                     f'fill="{_PALETTE[int(c) % len(_PALETTE)]}">cluster {int(c)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args, cfg: RunConfig, out: Outputs) -> None:
    es = _load_embeddings(args.embeddings)
    try:
        clusters = load_clusters(args.clusters)
    except FileNotFoundError:
        raise DataError(f"clusters file not found: {args.clusters}") from None
    missing = [sid for sid in es.subject_ids if sid not in clusters]
    if missing:
        raise DataError(f"{len(missing)} embedded subjects have no cluster (e.g. {missing[0]})")
    labels = np.array([clusters[sid] for sid in es.subject_ids])
    out.path(args.out).write_text(render_svg(es.means, labels), encoding="utf-8")

    if not (args.model or args.data):
        return
    traj_out = args.trajectories or str(Path(args.out).with_suffix("")) + "_trajectories.csv"
    rows = []
    if args.model:
        model = _load_model(args.model)
        if not isinstance(model, DtmState):
            raise UsageError("--model for plot must be a dtm model")
        lo, hi = model.basis.domain
        grid = np.linspace(lo, hi, args.grid)
        for c in np.unique(labels):
            pred = predict_trajectory(model, es.means[labels == c].mean(0), grid)
            rows += [(int(c), t, mv, s) for t, mv, s in zip(grid, pred.mean, pred.sd)]
    else:
        ds = _load_data(args.data)
        times = np.concatenate([tr.times for tr in ds])
        grid = np.linspace(times.min(), times.max(), args.grid)
        for c, mean in cluster_mean_trajectories(ds, clusters, grid).items():
            rows += [(c, t, mv, float("nan")) for t, mv in zip(grid, mean)]
    with out.path(traj_out).open("w", encoding="utf-8") as fh:
        fh.write("cluster,time,mean,sd\n")
        for c, t, mv, s in rows:
            fh.write(f"{c},{float(t)!r},{float(mv)!r},{float(s)!r}\n")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=None, help="cap on numerical worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dtmap", description="Embeddings of sparse trajectories.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--truth")

    s = sub.add_parser("fit", parents=[common], help="fit a model")
    s.add_argument("--model", choices=["lmm", "fpca", "dtm"], required=True)
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--show-config", action="store_true", help="print the training config and exit")

    s = sub.add_parser("embed", parents=[common], help="embed subjects with a fitted model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("predict", parents=[common], help="predict a trajectory at a latent point")
    s.add_argument("--model", required=True)
    s.add_argument("--x", required=True, help='latent point, e.g. "0.3,-1.2"')
    s.add_argument("--times", required=True, help='"0,1,2" or "start:stop:count"')
    s.add_argument("--out", required=True)

    s = sub.add_parser("cluster", parents=[common], help="Ward clustering of embeddings")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", parents=[common], help="cross-validated held-out log-likelihood")
    s.add_argument("--data", required=True)
    s.add_argument("--models", default="lmm,fpca,dtm")
    s.add_argument("--folds", type=int, default=10)
    s.add_argument("--mc-samples", type=int, default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("associate", parents=[common], help="outcome association permutation test")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--outcomes", required=True, help="dataset CSV carrying outcome columns")
    s.add_argument("--outcome-col")
    s.add_argument("--permutations", type=int, default=10000)
    s.add_argument("--out", required=True)

    s = sub.add_parser("plot", parents=[common], help="SVG scatter and per-cluster trajectories")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--clusters", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--model", help="dtm model; trajectories are predicted at cluster centroids")
    s.add_argument("--data", help="dataset; trajectories are binned observation means")
    s.add_argument("--trajectories", help="path of the per-cluster trajectory CSV")
    s.add_argument("--grid", type=int, default=50)
    return p


COMMANDS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "embed": cmd_embed, "predict": cmd_predict,
    "cluster": cmd_cluster, "evaluate": cmd_evaluate, "associate": cmd_associate, "plot": cmd_plot,
}


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be positive")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = None
    try:
        cfg = load_run_config(args.config)
        out = Outputs(cfg.output_dir)
        with _thread_limit(args.threads):
            COMMANDS[args.command](args, cfg, out)
        out.commit()
        return EXIT_OK
    except UsageError as exc:
        code, msg = EXIT_USAGE, str(exc)
    except (DataError, OSError) as exc:
        code, msg = EXIT_DATA, str(exc)
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        code, msg = EXIT_NUMERIC, f"numerical failure: {exc}"
    except ValueError as exc:
        code, msg = EXIT_USAGE, str(exc)
    if out is not None:
        out.discard()
    print(f"dtmap {args.command}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
