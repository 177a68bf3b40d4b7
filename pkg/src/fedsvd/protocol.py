"""The four-step FedSVD session: trusted authority, computation service
provider and k users, each a sequential state machine over an Endpoint.

Step 1  TA -> users   : SeedP, StripQ, PairSeeds          (TA then goes offline)
Step 2  users -> CSP  : MaskedBatch per mini-batch        (secure aggregation of P X_i Q_i)
Step 3  CSP -> users  : ResultUSigma, or MaskedWeights for LR
Step 4  users <-> CSP : MaskedQiR / MaskedViR              (only when V is recovered)
"""
from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from . import messages as msg
from .errors import ConfigError, DimensionMismatch, MissingParty, ProtocolAborted, TransportTimeout
from .linalg import BlockDiagMatrix, SvdResult, blockdiag_mul_left, pinv_apply, svd_dense
from .masks import (
    MaskedStripT,
    QStrip,
    apply_masks,
    efficient_orthogonal,
    generate_P,
    generate_R,
    invert_R,
    mask_strip_transpose,
    split_Q,
    unmask_v,
)
from .prng import SeededGaussianStream, derive_seed
from .secagg import (
    FixedPointCodec,
    PairwiseMaskPlan,
    aggregate_batches,
    mask_batch,
    minibatch_schedule,
)
from .transport import (
    Endpoint,
    Frame,
    InMemoryNetwork,
    MsgType,
    ShaperConfig,
    TcpEndpoint,
    shape,
)

log = logging.getLogger(__name__)

TA, CSP = "ta", "csp"
APPS = ("svd", "pca", "lr", "lsa")
LR_RCOND = 1e-12

_TAG_P, _TAG_Q, _TAG_PAIRS, _TAG_R = 0x50, 0x51, 0x52, 0x53


def user_name(i: int) -> str:
    return f"user{i}"


@dataclass(frozen=True)
class SessionConfig:
    m: int
    n: int
    widths: tuple[int, ...]
    b: int = 32
    master_seed: int = 0
    codec: object = field(default_factory=FixedPointCodec)
    r: int | None = None
    recover_V: bool = True
    recover_U: bool = True
    session_id: int = 1
    batch_budget_bytes: int = 64 << 20
    full_matrices: bool = True
    app: str = "svd"
    label_holder: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.m < 1 or self.n < 1:
            raise ConfigError("m and n must be positive")
        if not self.widths or any(w < 1 for w in self.widths) or sum(self.widths) != self.n:
            raise ConfigError(f"widths {self.widths} must be positive and sum to n={self.n}")
        if self.b < 1:
            raise ConfigError("block size must be >= 1")
        if self.r is not None and not 1 <= self.r <= min(self.m, self.n):
            raise ConfigError(f"r={self.r} must lie in [1, min(m, n)={min(self.m, self.n)}]")
        if self.app not in APPS:
            raise ConfigError(f"unknown app {self.app!r}")
        if not 0 <= self.label_holder < len(self.widths):
            raise ConfigError("label_holder is not a valid party index")
        if self.batch_budget_bytes < 8 * self.n:
            raise ConfigError("batch budget is smaller than one row")

    @property
    def k(self) -> int:
        return len(self.widths)

    @property
    def col_ranges(self) -> list[tuple[int, int]]:
        out, start = [], 0
        for w in self.widths:
            out.append((start, start + w))
            start += w
        return out

    @property
    def wants_v(self) -> bool:
        return self.recover_V and self.app in ("svd", "lsa")

    @property
    def seed_p(self) -> int:
        return derive_seed(self.master_seed, _TAG_P)


@dataclass
class FedSvdResult:
    owner: int
    U: np.ndarray | None
    sigma: np.ndarray
    Vt_local: np.ndarray | None = None
    weights: np.ndarray | None = None


@dataclass(frozen=True)
class TranscriptEntry:
    role: str
    seq: int
    direction: str  # "send" | "recv"
    peer: str
    step: int
    msg_type: str
    nbytes: int
    digest: str

    def line(self) -> str:
        return "\t".join(str(v) for v in (self.role, self.seq, self.step, self.direction,
                                          self.peer, self.msg_type, self.nbytes, self.digest))


class RecordingEndpoint(Endpoint):
    """Endpoint wrapper that logs every frame in the role's program order."""

    def __init__(self, inner: Endpoint):
        super().__init__(inner.name)
        self.inner = inner
        self.bytes_sent = inner.bytes_sent
        self.bytes_received = inner.bytes_received
        self.entries: list[TranscriptEntry] = []
        self.frames: list[tuple[str, str, Frame]] = []

    def _note(self, direction: str, peer: str, frame: Frame):
        raw = frame.encode()
        self.entries.append(TranscriptEntry(self.name, len(self.entries), direction, peer, frame.step,
                                            frame.msg_type.name, len(raw),
                                            hashlib.sha256(raw).hexdigest()[:16]))
        self.frames.append((direction, peer, frame))

    def send(self, dest, frame):
        self.inner.send(dest, frame)
        self._note("send", dest, frame)

    def recv(self, src, timeout=60.0):
        frame = self.inner.recv(src, timeout)
        self._note("recv", src, frame)
        return frame

    def close(self):
        self.inner.close()


# -- Step 1: trusted authority ----------------------------------------------

@dataclass(frozen=True)
class TaInit:
    seed_p: Frame
    strips: tuple[Frame, ...]
    pair_seeds: tuple[Frame, ...]


def ta_init(cfg: SessionConfig) -> TaInit:
    """Generate and package the masks. Nothing is kept once this returns."""
    q = efficient_orthogonal(cfg.n, cfg.b, SeededGaussianStream(derive_seed(cfg.master_seed, _TAG_Q)))
    strips = split_Q(q, cfg.widths)
    plan = PairwiseMaskPlan.from_stream(cfg.k, SeededGaussianStream(derive_seed(cfg.master_seed, _TAG_PAIRS)))
    sid = cfg.session_id
    return TaInit(
        msg.encode_seed_p(sid, cfg.seed_p, cfg.m, cfg.b),
        tuple(msg.encode_strip(sid, s) for s in strips),
        tuple(msg.encode_pair_seeds(sid, cfg.k, plan.seeds_for(i)) for i in range(cfg.k)),
    )


def run_ta(cfg: SessionConfig, ep: Endpoint) -> None:
    init = ta_init(cfg)
    for i in range(cfg.k):
        dest = user_name(i)
        ep.send(dest, init.seed_p)
        ep.send(dest, init.strips[i])
        ep.send(dest, init.pair_seeds[i])


# -- Steps 2-4: users ---------------------------------------------------------

def user_mask_data(x_local: np.ndarray, p: BlockDiagMatrix, strip: QStrip) -> np.ndarray:
    """``X'_i = P X_i Q_i`` using block products only."""
    return apply_masks(x_local, p, strip)


def user_recover_U(u_masked: np.ndarray, p: BlockDiagMatrix) -> np.ndarray:
    if u_masked.shape[0] != p.dim:
        raise DimensionMismatch(f"U' has {u_masked.shape[0]} rows, P has dim {p.dim}")
    return blockdiag_mul_left(p.T, u_masked)


def run_user(cfg: SessionConfig, i: int, x_local: np.ndarray, ep: Endpoint, local_seed: int,
             labels: np.ndarray | None = None, timeout: float = 60.0) -> FedSvdResult:
    x_local = np.ascontiguousarray(x_local, dtype=np.float64)
    lo, hi = cfg.col_ranges[i]
    if x_local.shape != (cfg.m, hi - lo):
        raise DimensionMismatch(f"user {i} holds {x_local.shape}, expected {(cfg.m, hi - lo)}")
    sid = cfg.session_id

    seed, m, b = msg.decode_seed_p(msg.expect(ep.recv(TA, timeout), MsgType.SEED_P))
    strip = msg.decode_strip(msg.expect(ep.recv(TA, timeout), MsgType.STRIP_Q))
    k, peer_seeds = msg.decode_pair_seeds(msg.expect(ep.recv(TA, timeout), MsgType.PAIR_SEEDS))
    p = generate_P(seed, m, b)
    if log.isEnabledFor(logging.DEBUG):
        log.debug("user %d: P orthogonality error %.2e", i, p.max_orthogonality_error())
    plan = PairwiseMaskPlan.for_party(k, i, peer_seeds)

    masked = user_mask_data(x_local, p, strip)
    for t, (r0, r1) in enumerate(minibatch_schedule(cfg.m, cfg.n, cfg.batch_budget_bytes)):
        words = mask_batch(plan, i, t, masked[r0:r1], cfg.codec)
        ep.send(CSP, msg.encode_masked_batch(sid, t, (r0, r1), words))
    del masked

    if cfg.app == "lr":
        if i == cfg.label_holder:
            if labels is None:
                raise ConfigError("label holder has no labels")
            y_masked = blockdiag_mul_left(p, np.asarray(labels, dtype=np.float64)[:, None])[:, 0]
            ep.send(CSP, msg.encode_vector(sid, msg.STEP_AGGREGATE, MsgType.MASKED_LABEL, y_masked))
        w_masked = msg.decode_vector(msg.expect(ep.recv(CSP, timeout), MsgType.MASKED_WEIGHTS))
        return FedSvdResult(i, None, np.zeros(0), weights=strip.apply(w_masked))

    u_masked, sigma = msg.decode_result(msg.expect(ep.recv(CSP, timeout), MsgType.RESULT_U_SIGMA))
    u = user_recover_U(u_masked, p) if cfg.recover_U else None
    result = FedSvdResult(i, u, sigma)
    if cfg.wants_v:
        r = generate_R(strip, SeededGaussianStream(local_seed))
        ep.send(CSP, msg.encode_masked_qir(sid, mask_strip_transpose(strip, r)))
        vt_masked = msg.decode_masked_vir(msg.expect(ep.recv(CSP, timeout), MsgType.MASKED_VIR))
        result.Vt_local = unmask_v(vt_masked, invert_R(r))
    return result


# -- Steps 2-4: computation service provider ---------------------------------

@dataclass
class CspState:
    """What the CSP holds at the end of a session (exposed for audits)."""

    x_masked: np.ndarray | None = None
    svd: SvdResult | None = None
    y_masked: np.ndarray | None = None


def _incoming_slabs(cfg: SessionConfig, ep: Endpoint, t: int, rows: tuple[int, int], timeout: float):
    for i in range(cfg.k):
        try:
            frame = msg.expect(ep.recv(user_name(i), timeout), MsgType.MASKED_BATCH)
        except TransportTimeout as exc:
            raise MissingParty(f"user {i} did not deliver batch {t}") from exc
        batch, got_rows, words = msg.decode_masked_batch(frame, cfg.n)
        if batch != t or got_rows != rows:
            raise MissingParty(f"user {i} sent batch {batch} rows {got_rows}, expected {t} {rows}")
        yield words


def csp_collect(cfg: SessionConfig, ep: Endpoint, timeout: float = 60.0) -> np.ndarray:
    """Receive every mini-batch from every user and aggregate them into X'."""
    x = np.empty((cfg.m, cfg.n))
    for t, (r0, r1) in enumerate(minibatch_schedule(cfg.m, cfg.n, cfg.batch_budget_bytes)):
        x[r0:r1] = aggregate_batches(_incoming_slabs(cfg, ep, t, (r0, r1), timeout), cfg.codec)
    return x


def csp_factorize(cfg: SessionConfig, x_masked: np.ndarray) -> tuple[np.ndarray, np.ndarray, SvdResult]:
    """SVD of X'. Returns what is broadcast (U' or its top-r columns, sigma) and the full result."""
    svd = svd_dense(x_masked, full_matrices=cfg.full_matrices)
    if cfg.r is not None:
        u_out, sigma_out = svd.U[:, :cfg.r], svd.sigma[:cfg.r]
    else:
        u_out, sigma_out = svd.U, svd.sigma
    if cfg.app == "pca":
        sigma_out = np.zeros(0)
    return np.ascontiguousarray(u_out), sigma_out.copy(), svd


def csp_masked_v(cfg: SessionConfig, svd: SvdResult, masked_qt: MaskedStripT) -> np.ndarray:
    """``[V_i^T]^R = V'^T [Q_i^T]^R``, restricted to the top-r rows when truncating."""
    vt = svd.Vt if cfg.r is None else svd.Vt[:cfg.r]
    return masked_qt.left_multiply(vt)


def run_csp(cfg: SessionConfig, ep: Endpoint, timeout: float = 60.0,
            state: CspState | None = None) -> CspState:
    state = state if state is not None else CspState()
    sid = cfg.session_id
    users = [user_name(i) for i in range(cfg.k)]
    try:
        state.x_masked = csp_collect(cfg, ep, timeout)
        if cfg.app == "lr":
            frame = ep.recv(user_name(cfg.label_holder), timeout)
            state.y_masked = msg.decode_vector(msg.expect(frame, MsgType.MASKED_LABEL))
    except (MissingParty, TransportTimeout) as exc:
        for u in users:
            ep.send(u, msg.encode_abort(sid, msg.STEP_AGGREGATE, str(exc)))
        raise MissingParty(str(exc)) from exc

    u_out, sigma_out, svd = csp_factorize(cfg, state.x_masked)
    state.svd = svd
    if cfg.app == "lr":
        w_masked = pinv_apply(svd, state.y_masked, LR_RCOND)
        for u in users:
            ep.send(u, msg.encode_vector(sid, msg.STEP_FACTORIZE, MsgType.MASKED_WEIGHTS, w_masked))
        return state
    result = msg.encode_result(sid, u_out, sigma_out)
    for u in users:
        ep.send(u, result)
    if cfg.wants_v:
        for u in users:
            masked_qt = msg.decode_masked_qir(msg.expect(ep.recv(u, timeout), MsgType.MASKED_QIR))
            ep.send(u, msg.encode_masked_vir(sid, csp_masked_v(cfg, svd, masked_qt)))
    return state


def recover_V_roundtrip(cfg: SessionConfig, strip: QStrip, r: BlockDiagMatrix, svd: SvdResult) -> np.ndarray:
    """The V recovery exchange evaluated in-process (no transport)."""
    masked = mask_strip_transpose(strip, r)
    return unmask_v(csp_masked_v(cfg, svd, masked), invert_R(r))


# -- orchestration -------------------------------------------------------------

@dataclass
class SessionOutcome:
    results: list[FedSvdResult]
    transcripts: dict[str, list[TranscriptEntry]]
    csp: CspState
    bytes_sent: dict[str, int]
    frames: dict[str, list[tuple[str, str, Frame]]] = field(default_factory=dict)

    def transcript_lines(self) -> list[str]:
        return [e.line() for role in sorted(self.transcripts) for e in self.transcripts[role]]

    def transcript_text(self) -> str:
        return "\n".join(self.transcript_lines()) + "\n"


def user_local_seed(cfg: SessionConfig, i: int) -> int:
    return derive_seed(cfg.master_seed, _TAG_R, i)


def make_endpoints(roles: list[str], transport: str = "mem") -> dict[str, Endpoint]:
    if transport == "mem":
        net = InMemoryNetwork()
        return {r: net.endpoint(r) for r in roles}
    if transport == "tcp":
        eps = {r: TcpEndpoint(r, ("127.0.0.1", 0), {}) for r in roles}
        addrs = {r: ep.address for r, ep in eps.items()}
        for ep in eps.values():
            ep.peers.update(addrs)
        return eps
    raise ConfigError(f"unknown transport {transport!r}")


def run_fedsvd(cfg: SessionConfig, blocks, *, transport: str = "mem", shaper: ShaperConfig | None = None,
               labels=None, timeout: float = 120.0, endpoints: dict[str, Endpoint] | None = None,
               user_seeds=None) -> SessionOutcome:
    """Run every role of one session, each in its own thread, and collect the outputs."""
    blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
    if len(blocks) != cfg.k:
        raise ConfigError(f"{len(blocks)} data blocks for {cfg.k} users")
    roles = [TA, CSP] + [user_name(i) for i in range(cfg.k)]
    raw = endpoints or make_endpoints(roles, transport)
    eps = {r: RecordingEndpoint(shape(raw[r], shaper) if shaper else raw[r]) for r in roles}
    seeds = user_seeds or [user_local_seed(cfg, i) for i in range(cfg.k)]

    results: list[FedSvdResult | None] = [None] * cfg.k
    state = CspState()
    errors: dict[str, BaseException] = {}

    def guard(role, fn, *args):
        try:
            return fn(*args)
        except BaseException as exc:  # re-raised in the caller thread
            errors[role] = exc

    def user_task(i):
        lab = labels if (cfg.app == "lr" and i == cfg.label_holder) else None
        results[i] = run_user(cfg, i, blocks[i], eps[user_name(i)], seeds[i], lab, timeout)

    threads = [threading.Thread(target=guard, args=(TA, run_ta, cfg, eps[TA])),
               threading.Thread(target=guard, args=(CSP, run_csp, cfg, eps[CSP], timeout, state))]
    threads += [threading.Thread(target=guard, args=(user_name(i), user_task, i)) for i in range(cfg.k)]
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        if endpoints is None:
            for ep in raw.values():
                ep.close()
    if errors:
        # MissingParty and aborts are consequences; surface the originating failure
        derived = (MissingParty, ProtocolAborted, TransportTimeout)
        roots = [r for r in sorted(errors) if not isinstance(errors[r], derived)]
        role = roots[0] if roots else (CSP if CSP in errors else sorted(errors)[0])
        raise errors[role]
    return SessionOutcome(
        results=list(results),
        transcripts={r: ep.entries for r, ep in eps.items()},
        csp=state,
        bytes_sent={r: ep.total_sent() for r, ep in eps.items()},
        frames={r: ep.frames for r, ep in eps.items()},
    )


def with_overrides(cfg: SessionConfig, **kw) -> SessionConfig:
    return replace(cfg, **kw)
