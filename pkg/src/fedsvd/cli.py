"""Command-line entry point: ``fedsvd <subcommand> ...``.

Matrices are exchanged as FSVM files (see :mod:`fedsvd.storage`); ``.csv``
inputs are accepted wherever a matrix is read. Results are written per role
into ``--out`` as FSVM files plus a ``meta.txt`` key/value summary, and every
session leaves one transcript log per role under ``<out>/transcripts``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as datasets
from .apps import fed_lr, fed_lsa, fed_pca, secure_feature_mean
from .attacks import attack_suite, summarize, write_report_csv
from .bench import bench_sweep, linear_r2, write_bench_csv
from .errors import ConfigError, FedSvdError
from .linalg import svd_dense
from .metrics import metric_suite
from .protocol import (
    CSP,
    TA,
    CspState,
    RecordingEndpoint,
    SessionConfig,
    SessionOutcome,
    run_csp,
    run_fedsvd,
    run_ta,
    run_user,
    user_local_seed,
    user_name,
)
from .secagg import codec_from_name
from .storage import COL_MAJOR, ROW_MAJOR, write_matrix
from .transport import ShaperConfig, TcpEndpoint, parse_addr, shape

log = logging.getLogger("fedsvd")

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


# -- config ------------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def session_from_mapping(raw: dict[str, str], **defaults) -> SessionConfig:
    """Build a SessionConfig; keys mirror its field names plus ``codec`` and ``frac_bits``."""
    known = {f.name: f for f in fields(SessionConfig)}
    kw = dict(defaults)
    codec_name, frac_bits = raw.get("codec", "fixed"), int(raw.get("frac_bits", 40))
    for key, value in raw.items():
        if key in ("codec", "frac_bits"):
            continue
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key == "widths":
            kw[key] = tuple(int(v) for v in value.replace(" ", "").split(",") if v)
        elif key in ("recover_V", "recover_U", "full_matrices"):
            if value.lower() not in _BOOL:
                raise ConfigError(f"{key}: not a boolean: {value!r}")
            kw[key] = _BOOL[value.lower()]
        elif key == "app":
            kw[key] = value
        elif key == "r":
            kw[key] = None if value.lower() in ("", "none") else int(value)
        else:
            kw[key] = int(value, 0)
    kw["codec"] = codec_from_name(codec_name, frac_bits)
    if "widths" in kw and "n" not in kw:
        kw["n"] = sum(kw["widths"])
    missing = [k for k in ("m", "n", "widths") if k not in kw]
    if missing:
        raise ConfigError(f"config lacks {', '.join(missing)}")
    return SessionConfig(**kw)


def _config_mapping(args) -> dict[str, str]:
    raw = read_config(args.config) if getattr(args, "config", None) else {}
    overrides = {"master_seed": args.seed, "b": args.block_size, "frac_bits": args.frac_bits,
                 "batch_budget_bytes": args.mem_budget, "r": getattr(args, "rank", None),
                 "app": getattr(args, "app", None)}
    for key, value in overrides.items():
        if value is not None:
            raw[key] = str(value)
    return raw


# -- output helpers ----------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return ",".join(repr(float(x)) for x in v)
    return str(v)


def write_meta(path, items: dict) -> None:
    Path(path).write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in items.items()))


def write_manifest(out: Path, args, datasets_used) -> None:
    write_meta(out / "manifest.txt", {
        "command": args.command,
        "role": getattr(args, "role", ""),
        "config": args.config or "",
        "seed": args.seed if args.seed is not None else "",
        "datasets": ";".join(str(p) for p in datasets_used),
        "out": str(out),
        "transport": args.transport,
        "bandwidth": args.bandwidth or "",
        "rtt_ms": args.rtt or "",
    })


def _load(path, transpose: bool = False) -> np.ndarray:
    x = datasets.load_matrix(path)
    return x.T.copy() if transpose else x


def _shaper(args) -> ShaperConfig | None:
    if args.bandwidth is None and args.rtt is None:
        return None
    return ShaperConfig(args.bandwidth, args.rtt)


def _write_transcripts(out: Path, transcripts) -> None:
    tdir = out / "transcripts"
    tdir.mkdir(parents=True, exist_ok=True)
    for role, entries in transcripts.items():
        (tdir / f"{role}.log").write_text("".join(e.line() + "\n" for e in entries))


def _write_user_result(udir: Path, res, cfg: SessionConfig, extra: dict | None = None) -> None:
    udir.mkdir(parents=True, exist_ok=True)
    meta = {"owner": res.owner, "app": cfg.app, "r": cfg.r if cfg.r is not None else "full"}
    if res.U is not None:
        write_matrix(udir / "U.fsvm", res.U)
    if res.sigma.size:
        write_matrix(udir / "sigma.fsvm", res.sigma)
        meta["sigma"] = res.sigma
    if res.Vt_local is not None:
        write_matrix(udir / "Vt.fsvm", res.Vt_local)
    if res.weights is not None:
        write_matrix(udir / "weights.fsvm", res.weights)
    meta.update(extra or {})
    write_meta(udir / "meta.txt", meta)


def _write_csp_result(cdir: Path, cfg: SessionConfig, state: CspState) -> None:
    # only shapes and the (public) spectrum; never data
    cdir.mkdir(parents=True, exist_ok=True)
    meta = {"app": cfg.app, "m": cfg.m, "n": cfg.n, "parties": cfg.k}
    if state.svd is not None:
        meta["sigma_count"] = state.svd.sigma.size
    write_meta(cdir / "meta.txt", meta)


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    kind = args.kind
    if kind == "powerlaw":
        if args.m is None or args.n is None:
            raise ConfigError("powerlaw needs --m and --n")
        x = datasets.synth_powerlaw(args.m, args.n, args.alpha, args.seed or 0)
    elif kind == "wine":
        x = datasets.wine_like(args.n or 6497, args.seed or 0)
    elif kind == "mnist":
        x = datasets.mnist_like(args.n or 2000, args.seed or 0)
    else:
        x = datasets.movielens_like(seed=args.seed or 0)
    if args.transpose:
        x = x.T
    _write_split(x, Path(args.out), args.split)
    return 0


def _write_split(x: np.ndarray, out: Path, split: str | None) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    write_matrix(out, x)
    if split:
        widths = [int(w) for w in split.split(",")]
        if sum(widths) != x.shape[1]:
            raise ConfigError(f"split widths sum to {sum(widths)}, matrix has {x.shape[1]} columns")
        start = 0
        for i, w in enumerate(widths):
            write_matrix(out.with_name(f"{out.stem}.part{i}{out.suffix}"), x[:, start:start + w])
            start += w


def cmd_ingest(args) -> int:
    if args.ratings:
        x = datasets.ingest_ratings(args.input, args.items, args.users)
    else:
        x = datasets.ingest_csv(args.input, has_header=args.header, delimiter=args.delimiter)
    if args.transpose:
        x = x.T
    layout = COL_MAJOR if args.column_major else ROW_MAJOR
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_matrix(args.out, x, layout)
    if args.split:
        _write_split(x, Path(args.out), args.split)
    return 0


def _blocks_for_run(args, raw: dict[str, str]) -> list[np.ndarray]:
    mats = [_load(p, args.transpose) for p in args.data]
    if len(mats) == 1 and "widths" in raw:
        widths = [int(w) for w in raw["widths"].split(",")]
        bounds = np.cumsum([0] + widths)
        if bounds[-1] != mats[0].shape[1]:
            raise ConfigError("config widths do not match the data file")
        mats = [mats[0][:, bounds[i]:bounds[i + 1]] for i in range(len(widths))]
    return mats


def cmd_run(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raw = _config_mapping(args)
    if args.role == "all-in-one":
        return _run_all_in_one(args, raw, out)
    cfg = session_from_mapping(raw)
    if not args.listen:
        raise ConfigError("--listen is required for a networked role")
    peers = dict(_parse_peer(p) for p in args.connect or [])
    write_manifest(out, args, args.data or [])
    if args.role == "ta":
        ep = _endpoint(TA, args, peers)
        try:
            run_ta(cfg, ep)
        finally:
            ep.close()
        _write_transcripts(out, {TA: ep.entries})
    elif args.role == "csp":
        ep = _endpoint(CSP, args, peers)
        state = CspState()
        try:
            run_csp(cfg, ep, args.timeout, state)
        finally:
            ep.close()
        _write_csp_result(out, cfg, state)
        _write_transcripts(out, {CSP: ep.entries})
    else:
        if args.index is None or not args.data:
            raise ConfigError("user role needs --index and --data")
        name = user_name(args.index)
        x = _load(args.data[0], args.transpose)
        labels = _load(args.labels)[:, 0] if args.labels else None
        ep = _endpoint(name, args, peers)
        try:
            res = run_user(cfg, args.index, x, ep, user_local_seed(cfg, args.index), labels, args.timeout)
        finally:
            ep.close()
        _write_user_result(out, res, cfg)
        _write_transcripts(out, {name: ep.entries})
    return 0


def _parse_peer(spec: str) -> tuple[str, tuple[str, int]]:
    name, sep, addr = spec.partition("=")
    if not sep:
        raise ConfigError(f"--connect expects name=host:port, got {spec!r}")
    return name, parse_addr(addr)


def _endpoint(name: str, args, peers) -> RecordingEndpoint:
    inner = TcpEndpoint(name, parse_addr(args.listen), peers)
    cfg = _shaper(args)
    return RecordingEndpoint(shape(inner, cfg) if cfg else inner)


def _run_all_in_one(args, raw: dict[str, str], out: Path) -> int:
    if not args.data:
        raise ConfigError("--data is required")
    blocks = _blocks_for_run(args, raw)
    raw.setdefault("m", str(blocks[0].shape[0]))
    raw["widths"] = ",".join(str(b.shape[1]) for b in blocks)
    raw["n"] = str(sum(b.shape[1] for b in blocks))
    cfg = session_from_mapping(raw)
    write_manifest(out, args, args.data)
    labels = _load(args.labels)[:, 0] if args.labels else None
    extras: list[dict] = [{} for _ in blocks]
    kw = {"b": cfg.b, "master_seed": cfg.master_seed, "transport": args.transport, "codec": cfg.codec,
          "session_id": cfg.session_id, "batch_budget_bytes": cfg.batch_budget_bytes,
          "full_matrices": cfg.full_matrices}
    r = cfg.r or min(cfg.m, cfg.n)
    projections = None
    if cfg.app == "pca":
        mean = secure_feature_mean(blocks, cfg.master_seed)
        pcs, outcome = fed_pca([x - mean[:, None] for x in blocks], r, **kw)
        projections = [p.projection for p in pcs]
    elif cfg.app == "lr":
        if labels is None:
            raise ConfigError("the lr app needs --labels")
        lrs, outcome = fed_lr(blocks, labels, label_holder=cfg.label_holder, **kw)
        extras = [{"mse": res.mse} for res in lrs]
    elif cfg.app == "lsa":
        _, outcome = fed_lsa(blocks, r, **kw)
    else:
        outcome = run_fedsvd(cfg, blocks, transport=args.transport, shaper=_shaper(args),
                             timeout=args.timeout)
    _write_outcome(out, cfg, outcome, extras)
    for i, proj in enumerate(projections or []):
        write_matrix(out / user_name(i) / "projection.fsvm", proj)
    return 0


def _write_outcome(out: Path, cfg: SessionConfig, outcome: SessionOutcome, extras) -> None:
    for i, res in enumerate(outcome.results):
        _write_user_result(out / user_name(i), res, cfg, extras[i])
    _write_csp_result(out / CSP, cfg, outcome.csp)
    _write_transcripts(out, outcome.transcripts)
    write_meta(out / "bytes_sent.txt", dict(sorted(outcome.bytes_sent.items())))


def cmd_attack(args) -> int:
    x = _load(args.data, args.transpose)
    reports = attack_suite(x, args.b, args.seeds, n_components=args.n_components,
                           identity_masks=args.identity, max_iter=args.max_iter)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(args.out, reports)
    for (method, b), score in sorted(summarize(reports).items(), key=lambda kv: (kv[0][0], kv[0][1] or 0)):
        print(f"{method:6s} b={b if b is not None else '-':>5}  mean score {score:.5f}")
    return 0


def cmd_metrics(args) -> int:
    blocks = [_load(p, args.transpose) for p in args.data]
    x = np.hstack(blocks)
    res_dir = Path(args.result)
    users = sorted((p for p in res_dir.glob("user*") if p.is_dir()), key=lambda p: int(p.name[4:]))
    if not users:
        raise ConfigError(f"no user result directories under {res_dir}")
    first = users[0]
    u = datasets.load_matrix(first / "U.fsvm")
    sigma = datasets.load_matrix(first / "sigma.fsvm")[:, 0]
    vt = np.hstack([datasets.load_matrix(p / "Vt.fsvm") for p in users])
    oracle = svd_dense(x, full_matrices=False)
    k = sigma.size if args.rank is None else args.rank
    rec = metric_suite(x, u, sigma, vt, oracle.U, oracle.Vt, rank=k)
    row = rec.as_dict()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(row))
        w.writerow([row[c] for c in row])
    for key, value in row.items():
        print(f"{key}: {value}")
    return 0


def cmd_bench(args) -> int:
    shaper = _shaper(args)
    points = bench_sweep(args.m, args.sizes, k=args.parties, b=args.block_size or 32,
                         seed=args.seed or 0, transport=args.transport, shaper=shaper,
                         repeats=args.repeats)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(args.out, points)
    ok = [p for p in points if p.error is None]
    if len(ok) >= 3:
        print(f"linear fit of wall time vs n: R^2 = {linear_r2([p.n for p in ok], [p.wall_time for p in ok]):.4f}")
    for p in points:
        print(f"n={p.n} time={p.wall_time:.3f}s {p.error or ''}".rstrip())
    return 0


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value session config")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--block-size", type=int, help="mask block size b")
    common.add_argument("--frac-bits", type=int, help="fixed-point fractional bits")
    common.add_argument("--transport", choices=("mem", "tcp"), default="mem")
    common.add_argument("--listen", help="host:port this role listens on (tcp)")
    common.add_argument("--connect", action="append", metavar="ROLE=HOST:PORT",
                        help="peer address, repeatable (tcp)")
    common.add_argument("--bandwidth", type=float, help="shaper bandwidth in bytes/s")
    common.add_argument("--rtt", type=float, help="shaper round-trip time in ms")
    common.add_argument("--mem-budget", type=int, help="mini-batch budget in bytes")
    common.add_argument("--transpose", action="store_true", help="transpose input matrices")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedsvd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic or look-alike dataset")
    g.add_argument("--kind", choices=("powerlaw", "wine", "mnist", "movielens"), default="powerlaw")
    g.add_argument("--m", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--alpha", type=float, default=0.01)
    g.add_argument("--split", help="also write column blocks with these widths, e.g. 100,156")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    i = sub.add_parser("ingest", parents=[common], help="convert CSV or rating triples to FSVM")
    i.add_argument("input")
    i.add_argument("--header", action="store_true")
    i.add_argument("--delimiter", default=",")
    i.add_argument("--ratings", action="store_true", help="input is user item rating triples")
    i.add_argument("--items", type=int)
    i.add_argument("--users", type=int)
    i.add_argument("--column-major", action="store_true")
    i.add_argument("--split")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_ingest)

    r = sub.add_parser("run", parents=[common], help="run a session or one role of it")
    r.add_argument("--role", choices=("ta", "csp", "user", "all-in-one"), default="all-in-one")
    r.add_argument("--data", nargs="+", help="local block(s); all-in-one takes one per user")
    r.add_argument("--labels", help="label vector (lr app, label holder only)")
    r.add_argument("--index", type=int, help="user index for --role user")
    r.add_argument("--app", choices=("svd", "pca", "lr", "lsa"))
    r.add_argument("--rank", type=int, help="truncation r for pca/lsa")
    r.add_argument("--timeout", type=float, default=300.0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("attack", parents=[common], help="ICA attacks on masked data")
    a.add_argument("--data", required=True)
    a.add_argument("--b", type=int, nargs="+", default=[10, 1000])
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    a.add_argument("--n-components", type=int, default=32)
    a.add_argument("--max-iter", type=int, default=200)
    a.add_argument("--identity", action="store_true", help="debug: skip masking")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    mt = sub.add_parser("metrics", parents=[common], help="compare a run against a centralized SVD")
    mt.add_argument("--data", nargs="+", required=True)
    mt.add_argument("--result", required=True, help="output directory of a run")
    mt.add_argument("--rank", type=int)
    mt.add_argument("--out", required=True)
    mt.set_defaults(func=cmd_metrics)

    bn = sub.add_parser("bench", parents=[common], help="time and traffic sweep over n")
    bn.add_argument("--m", type=int, default=256)
    bn.add_argument("--sizes", type=int, nargs="+", default=[2000, 4000, 8000, 16000])
    bn.add_argument("--parties", type=int, default=2)
    bn.add_argument("--repeats", type=int, default=1)
    bn.add_argument("--out", required=True)
    bn.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FedSvdError, ValueError, OSError) as exc:
        print(f"fedsvd {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
