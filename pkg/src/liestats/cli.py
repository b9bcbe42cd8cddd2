"""Command-line front end.

Exit codes: 0 success, 1 input error, 2 numerical failure.  Reports are JSON
with sorted keys; the same flags and seed always give byte-identical output.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    DegenerateFace,
    DescriptorMismatch,
    EmptyProduct,
    InvalidElement,
    LieStatsError,
    MeshMismatch,
    OrientationFlip,
    OutOfDomain,
    ScoreCovarianceSingular,
)
from .groups import SE3, LieGroup, Product, parse_group
from .shape import (
    diffcoords_group,
    differential_coords,
    frame_from_pca,
    procrustes_align,
    read_mesh,
    relative_pose,
)
from .stats import group_mean, sample_wrapped_gaussian
from .testing import PermutationConfig, local_tests, permutation_test

DATASET_SCHEMA = "liestats.dataset/1"
REPORT_SCHEMA = "liestats.report/1"

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

# failures caused by the input rather than by the numerics
_INPUT_ERRORS = (InvalidElement, DescriptorMismatch, EmptyProduct, MeshMismatch,
                 DegenerateFace, OrientationFlip, OutOfDomain)


class InputError(Exception):
    pass


# dataset I/O ---------------------------------------------------------------------

def _load_json(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def _load_jsonl(path):
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: line {lineno}, column {exc.colno}: {exc.msg}") from None
    if not records or not isinstance(records[0], dict):
        raise InputError(f"{path}: line 1: expected a header object with the group tag")
    header = dict(records[0])
    header["samples"] = records[1:]
    return header


def load_dataset(path):
    """Read a dataset file; returns ``(group, samples (m, *shape), labels)``."""
    doc = _load_jsonl(path) if str(path).endswith(".jsonl") else _load_json(path)
    if not isinstance(doc, dict) or "group" not in doc or "samples" not in doc:
        raise InputError(f"{path}: a dataset needs 'group' and 'samples' fields")
    schema = doc.get("schema", DATASET_SCHEMA)
    if schema != DATASET_SCHEMA:
        raise InputError(f"{path}: unsupported schema {schema!r}")
    try:
        group = parse_group(doc["group"])
    except (ValueError, LieStatsError) as exc:
        raise InputError(f"{path}: {exc}") from None
    payloads = doc["samples"]
    if not isinstance(payloads, list) or not payloads:
        raise InputError(f"{path}: 'samples' must be a non-empty list")
    samples = np.empty((len(payloads),) + group.shape)
    for i, payload in enumerate(payloads):
        try:
            samples[i] = group.from_payload(payload)
        except (ValueError, TypeError, LieStatsError) as exc:
            raise InputError(f"{path}: sample {i}: {exc}") from None
    return group, samples, doc.get("labels")


def _clean(x):
    """Plain-Python copy of nested payloads with NaN mapped to None."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        return None if math.isnan(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dataset_document(group: LieGroup, samples, labels=None) -> dict:
    doc = {"schema": DATASET_SCHEMA, "group": group.tag,
           "samples": [_clean(group.to_payload(g)) for g in samples]}
    if labels is not None:
        doc["labels"] = list(labels)
    return doc


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _emit(text: str, output):
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def _emit_dataset(doc, args):
    if getattr(args, "jsonl", False):
        header = {k: v for k, v in doc.items() if k != "samples"}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(s, sort_keys=True) for s in doc["samples"]]
        _emit("\n".join(lines) + "\n", args.output)
    else:
        _emit(_dump(doc), args.output)


def _report(command, config, result):
    return _dump({"schema": REPORT_SCHEMA, "command": command,
                  "config": _clean(config), "result": _clean(result)})


# commands ----------------------------------------------------------------------

def cmd_mean(args):
    group, samples, _ = load_dataset(args.input)
    res = group_mean(group, samples, tol=args.tol, max_iter=args.max_iter)
    config = {"input": str(args.input), "tol": args.tol, "max_iter": args.max_iter}
    result = {"group": group.tag, "mean": group.to_payload(res.mean),
              "iterations": res.iterations, "residual": res.residual, "n_samples": len(samples)}
    _emit(_report("mean", config, result), args.output)


def _two_datasets(args):
    ga, A, _ = load_dataset(args.a)
    gb, B, _ = load_dataset(args.b)
    if ga != gb:
        raise InputError(f"datasets live on different groups: {ga.tag} vs {gb.tag}")
    return ga, A, B


def _perm_config(args):
    return PermutationConfig(n_permutations=args.permutations, seed=args.seed,
                             statistic=args.statistic, tol=args.tol, max_iter=args.max_iter,
                             workers=args.workers)


def _test_config(args, cfg):
    return {"a": str(args.a), "b": str(args.b), "alpha": args.alpha, **cfg.to_dict()}


def cmd_test(args):
    group, A, B = _two_datasets(args)
    cfg = _perm_config(args)
    rep = permutation_test(group, A, B, cfg)
    result = rep.to_dict(include_stats=args.keep_stats)
    result.pop("config")
    result["reject_null"] = rep.p_value <= args.alpha
    result.update(group=group.tag, m=len(A), n=len(B))
    _emit(_report("test", _test_config(args, cfg), result), args.output)


def _load_weights(path, K):
    doc = _load_json(path)
    if isinstance(doc, dict):
        doc = doc.get("weights")
    try:
        w = np.asarray(doc, dtype=float)
    except (TypeError, ValueError):
        raise InputError(f"{path}: weights must be a list of numbers") from None
    if w.shape != (K,) or not np.all(np.isfinite(w) & (w > 0)):
        raise InputError(f"{path}: expected {K} positive weights")
    return w


def _local(args):
    group, A, B = _two_datasets(args)
    if not isinstance(group, Product):
        raise InputError(f"{args.command} needs a product/power group dataset, got {group.tag}")
    weights = _load_weights(args.weights, len(group)) if args.weights else None
    cfg = _perm_config(args)
    rep = local_tests(group, A, B, cfg, alpha=args.alpha)
    config = _test_config(args, cfg)
    if args.weights:
        config["weights"] = str(args.weights)
    try:
        global_p = rep.global_p(weights=weights)
    except ScoreCovarianceSingular:
        if args.command == "globaltest":
            raise
        global_p = None  # too few permutations for the number of components
    if args.scalars:
        lines = ["nan" if math.isnan(p) else repr(float(p)) for p in rep.p_values]
        Path(args.scalars).write_text("\n".join(lines) + "\n")
    return group, A, B, rep, config, global_p


def cmd_localtest(args):
    group, A, B, rep, config, global_p = _local(args)
    result = rep.to_dict()
    result.pop("config")
    result.update(group=group.tag, m=len(A), n=len(B), global_p=global_p,
                  n_rejected=int(rep.reject_mask.sum()))
    _emit(_report("localtest", config, result), args.output)


def cmd_globaltest(args):
    group, A, B, rep, config, global_p = _local(args)
    result = {"group": group.tag, "m": len(A), "n": len(B), "global_p": global_p,
              "reject_null": global_p <= args.alpha,
              "components": len(group), "failed_components": sorted(rep.failures)}
    _emit(_report("globaltest", config, result), args.output)


def _parse_cov(spec, dim):
    try:
        return float(spec) * np.eye(dim)
    except ValueError:
        pass
    doc = _load_json(spec)
    if isinstance(doc, dict):
        doc = doc.get("matrix", doc.get("cov"))
    try:
        if np.ndim(doc) == 0:
            return float(doc) * np.eye(dim)
        cov = np.asarray(doc, dtype=float)
    except (TypeError, ValueError):
        raise InputError(f"{spec}: covariance must be a number or a matrix") from None
    if cov.ndim == 1 and cov.shape == (dim,):
        cov = np.diag(cov)
    if cov.shape != (dim, dim):
        raise InputError(f"{spec}: covariance must be {dim}x{dim}, got shape {cov.shape}")
    return cov


def cmd_synth(args):
    try:
        group = parse_group(args.group)
    except (ValueError, LieStatsError) as exc:
        raise InputError(str(exc)) from None
    if args.mean:
        doc = _load_json(args.mean)
        payload = doc["element"] if isinstance(doc, dict) and "element" in doc else doc
        try:
            mean = group.from_payload(payload)
        except (ValueError, TypeError, LieStatsError) as exc:
            raise InputError(f"{args.mean}: {exc}") from None
    else:
        mean = group.identity()
    cov = _parse_cov(args.cov, group.dim)
    if args.n < 1:
        raise InputError("-n must be at least 1")
    draw = sample_wrapped_gaussian(group, mean, cov, args.n, args.seed)
    doc = dataset_document(group, draw.samples)
    doc["provenance"] = {"command": "synth", "seed": args.seed, "n": args.n,
                         "cov": cov.tolist(), "mean": _clean(group.to_payload(mean)),
                         "rejections": draw.rejections}
    _emit_dataset(doc, args)


def _read_meshes(paths):
    meshes = []
    for p in paths:
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                meshes.append(read_mesh(p))
            for w in caught:
                print(f"warning: {p}: {w.message}", file=sys.stderr)
        except OSError as exc:
            raise InputError(f"{p}: {exc.strerror}") from None
        except (ValueError, LieStatsError) as exc:
            raise InputError(f"{p}: {exc}") from None
    return meshes


def cmd_pose(args):
    if len(args.meshes) % 2:
        raise InputError("pose expects pairs of meshes: A1 B1 [A2 B2 ...]")
    meshes = _read_meshes(args.meshes)
    firsts, seconds = meshes[0::2], meshes[1::2]
    ref_a = frame_from_pca(firsts[0])
    ref_b = frame_from_pca(seconds[0])
    poses = [relative_pose(frame_from_pca(a, ref_a), frame_from_pca(b, ref_b))
             for a, b in zip(firsts, seconds)]
    labels = [f"{pa} -> {pb}" for pa, pb in zip(args.meshes[0::2], args.meshes[1::2])]
    _emit_dataset(dataset_document(SE3(), np.stack(poses), labels), args)


def cmd_diffcoords(args):
    meshes = _read_meshes([args.reference] + list(args.targets))
    ref, targets = meshes[0], meshes[1:]
    for path, t in zip(args.targets, targets):
        if len(t.faces) != len(ref.faces):
            raise InputError(f"{path}: has {len(t.faces)} faces, reference has {len(ref.faces)}")
    if args.align:
        targets = procrustes_align([ref] + targets, 0)[1:]
    try:
        coords = np.stack([differential_coords(ref, t) for t in targets])
    except (MeshMismatch, OrientationFlip) as exc:
        raise InputError(str(exc)) from None
    _emit_dataset(dataset_document(diffcoords_group(ref), coords, list(args.targets)), args)


# argument parsing ---------------------------------------------------------------

def _add_numeric(p):
    p.add_argument("--tol", type=float, default=1e-10, help="group mean tolerance")
    p.add_argument("--max-iter", type=int, default=100, help="group mean iteration cap")


def _add_perm(p):
    p.add_argument("a", help="dataset of group A")
    p.add_argument("b", help="dataset of group B")
    p.add_argument("--statistic", choices=["t2", "bhattacharyya", "hellinger"], default="t2")
    p.add_argument("--permutations", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--workers", type=int, default=1,
                   help="threads for permutations; does not change results")
    _add_numeric(p)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are input errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(
        prog="liestats", description="Bi-invariant statistics and permutation tests on Lie groups.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mean", help="group mean of a dataset")
    p.add_argument("input")
    _add_numeric(p)
    p.set_defaults(func=cmd_mean)

    p = sub.add_parser("test", help="two-sample permutation test")
    _add_perm(p)
    p.add_argument("--keep-stats", action="store_true", help="include all permutation statistics")
    p.set_defaults(func=cmd_test)

    for name, func, text in (("localtest", cmd_localtest, "component-wise tests with BH-FDR"),
                             ("globaltest", cmd_globaltest, "global normal-score test")):
        p = sub.add_parser(name, help=text)
        _add_perm(p)
        p.add_argument("--weights", help="JSON list of positive per-component weights")
        p.add_argument("--scalars", help="write per-component p-values, one per line")
        p.set_defaults(func=func)

    p = sub.add_parser("synth", help="draw a wrapped Gaussian dataset")
    p.add_argument("--group", required=True, help="group tag, e.g. se3 or power:glplus:3:20")
    p.add_argument("--mean", help="JSON file with the mean element (default: identity)")
    p.add_argument("--cov", required=True,
                   help="covariance: a number (isotropic) or a JSON matrix/diagonal file")
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jsonl", action="store_true", help="write line-delimited JSON")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pose", help="SE(3) relative poses from mesh pairs")
    p.add_argument("meshes", nargs="+", help="A1 B1 [A2 B2 ...] (OFF or OBJ)")
    p.add_argument("--jsonl", action="store_true")
    p.set_defaults(func=cmd_pose)

    p = sub.add_parser("diffcoords", help="GL+(3)^m differential coordinates")
    p.add_argument("reference")
    p.add_argument("targets", nargs="+")
    p.add_argument("--align", action="store_true", help="Procrustes-align targets first")
    p.add_argument("--jsonl", action="store_true")
    p.set_defaults(func=cmd_diffcoords)

    for p in sub.choices.values():
        p.add_argument("--output", "-o", help="write to this file instead of stdout")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (LieStatsError, ArithmeticError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
