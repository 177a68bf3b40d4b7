import subprocess
import sys

import numpy as np
import pytest

from fedsvd import messages as msg
from fedsvd.errors import ConfigError, DimensionMismatch, MissingParty, ProtocolAborted
from fedsvd.linalg import BlockDiagMatrix, svd_dense
from fedsvd.masks import efficient_orthogonal, generate_P, generate_R, split_Q
from fedsvd.prng import SeededGaussianStream
from fedsvd.protocol import (
    CSP,
    TA,
    SessionConfig,
    csp_collect,
    csp_factorize,
    recover_V_roundtrip,
    run_csp,
    run_fedsvd,
    ta_init,
    user_mask_data,
    user_name,
    user_recover_U,
)
from fedsvd.secagg import PairwiseMaskPlan, mask_batch, minibatch_schedule
from fedsvd.transport import InMemoryNetwork, MsgType

from oracles import dense_matmul, singular_values_oracle, v_from_u

ULP = 2.0 ** -41


def split_cols(x, widths):
    bounds = np.cumsum([0] + list(widths))
    return [x[:, bounds[i]:bounds[i + 1]] for i in range(len(widths))]


def align(est, ref):
    return est * np.where(np.sum(est * ref, axis=0) < 0, -1.0, 1.0)


def reconstruct(res):
    s = res.sigma.size
    return (res.U[:, :s] * res.sigma) @ res.Vt_local[:s]


def deliver(cfg, masked_blocks, seed=0):
    """Send pre-masked user contributions to a fresh CSP endpoint; return it."""
    net = InMemoryNetwork()
    csp = net.endpoint(CSP)
    plan = PairwiseMaskPlan.from_stream(cfg.k, SeededGaussianStream(seed))
    for i, xm in enumerate(masked_blocks):
        ep = net.endpoint(user_name(i))
        for t, (lo, hi) in enumerate(minibatch_schedule(cfg.m, cfg.n, cfg.batch_budget_bytes)):
            ep.send(CSP, msg.encode_masked_batch(cfg.session_id, t, (lo, hi),
                                                 mask_batch(plan, i, t, xm[lo:hi], cfg.codec)))
    return csp


# -- configuration -------------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(m=4, n=5, widths=(2, 2)),
    dict(m=4, n=4, widths=(4,), b=0),
    dict(m=4, n=4, widths=(4,), r=5),
    dict(m=4, n=4, widths=(4,), app="nmf"),
    dict(m=0, n=4, widths=(4,)),
    dict(m=4, n=4, widths=(0, 4)),
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        SessionConfig(**kw)


# -- step 1 --------------------------------------------------------------------------

def test_ta_init_single_user_gets_all_of_Q():
    cfg = SessionConfig(m=5, n=7, widths=(7,), b=3)
    init = ta_init(cfg)
    (strip,) = [msg.decode_strip(f) for f in init.strips]
    q = strip.to_dense()
    assert q.shape == (7, 7) and np.abs(q.T @ q - np.eye(7)).max() <= 1e-10


def test_ta_init_three_aligned_users():
    cfg = SessionConfig(m=10, n=300, widths=(100, 100, 100), b=50)
    strips = [msg.decode_strip(f) for f in ta_init(cfg).strips]
    for i, s in enumerate(strips):
        assert s.col_range == (100 * i, 100 * i + 100)
        assert [seg.data.shape for seg in s.segments] == [(50, 50), (50, 50)]
    # densify and compare: the stacked strips form a 50-block-diagonal orthogonal Q
    q = np.vstack([s.to_dense() for s in strips])
    assert np.abs(q.T @ q - np.eye(300)).max() <= 1e-10
    blocks = np.kron(np.eye(6), np.ones((50, 50))) != 0
    assert np.all(q[~blocks] == 0)


def test_ta_init_is_stateless_and_seed_p_is_constant_size():
    cfg = SessionConfig(m=40, n=12, widths=(5, 7), b=4, master_seed=3)
    a, b = ta_init(cfg), ta_init(cfg)
    assert a == b
    sizes = {len(ta_init(SessionConfig(m=m, n=12, widths=(5, 7))).seed_p.encode()) for m in (10, 1000, 10**5)}
    assert len(sizes) == 1


def test_strip_bytes_scale_with_n_not_m():
    small = ta_init(SessionConfig(m=10, n=64, widths=(64,), b=8)).strips[0].size
    tall = ta_init(SessionConfig(m=5000, n=64, widths=(64,), b=8)).strips[0].size
    wide = ta_init(SessionConfig(m=10, n=128, widths=(128,), b=8)).strips[0].size
    assert small == tall and wide > small


# -- user masking ----------------------------------------------------------------------

def test_user_mask_identity_scatters():
    x = np.arange(15.0).reshape(5, 3)
    strip = split_Q(BlockDiagMatrix.identity(7, 2), [4, 3])[1]
    out = user_mask_data(x, BlockDiagMatrix.identity(5, 2), strip)
    np.testing.assert_array_equal(out[:, 4:], x)
    np.testing.assert_array_equal(out[:, :4], 0)


def test_user_mask_zero():
    p = generate_P(1, 6, 2)
    strip = split_Q(efficient_orthogonal(5, 2, SeededGaussianStream(2)), [5])[0]
    assert not user_mask_data(np.zeros((6, 5)), p, strip).any()


def test_user_mask_matches_dense_oracle():
    x = np.random.default_rng(0).standard_normal((8, 3))
    p = generate_P(4, 8, 2)
    q = efficient_orthogonal(7, 2, SeededGaussianStream(5))
    strip = split_Q(q, [4, 3])[1]
    ref = dense_matmul(dense_matmul(p.to_dense(), x), strip.to_dense())
    assert np.abs(user_mask_data(x, p, strip) - ref).max() <= 1e-12


# -- CSP aggregation and factorization ---------------------------------------------------

def test_csp_collect_single_user():
    cfg = SessionConfig(m=6, n=4, widths=(4,), batch_budget_bytes=2 * 4 * 8)
    xm = np.random.default_rng(1).standard_normal((6, 4))
    got = csp_collect(cfg, deliver(cfg, [xm]), timeout=1)
    assert np.abs(got - xm).max() <= ULP


def test_csp_collect_identity_masks_concatenate():
    rng = np.random.default_rng(2)
    x1, x2 = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
    cfg = SessionConfig(m=5, n=5, widths=(2, 3), b=2)
    strips = split_Q(BlockDiagMatrix.identity(5, 2), [2, 3])
    eye = BlockDiagMatrix.identity(5, 2)
    masked = [user_mask_data(x, eye, s) for x, s in zip((x1, x2), strips)]
    got = csp_collect(cfg, deliver(cfg, masked), timeout=1)
    assert np.abs(got - np.hstack([x1, x2])).max() <= 2 * ULP


def test_csp_collect_matches_dense_oracle():
    rng = np.random.default_rng(3)
    cfg = SessionConfig(m=9, n=7, widths=(3, 4), b=3, batch_budget_bytes=4 * 7 * 8)
    x = rng.standard_normal((9, 7))
    p = generate_P(11, 9, 3)
    q = efficient_orthogonal(7, 3, SeededGaussianStream(12))
    masked = [user_mask_data(xi, p, s) for xi, s in zip(split_cols(x, cfg.widths), split_Q(q, cfg.widths))]
    got = csp_collect(cfg, deliver(cfg, masked), timeout=1)
    ref = dense_matmul(dense_matmul(p.to_dense(), x), q.to_dense())
    assert np.abs(got - ref).max() <= 1e-9


def test_csp_factorize_identity_and_truncation():
    cfg = SessionConfig(m=4, n=4, widths=(4,))
    u, sigma, _ = csp_factorize(cfg, np.eye(4))
    np.testing.assert_allclose(sigma, np.ones(4), atol=1e-14)
    cfg_r = SessionConfig(m=6, n=5, widths=(5,), r=2)
    x = np.random.default_rng(0).standard_normal((6, 5))
    u, sigma, full = csp_factorize(cfg_r, x)
    assert u.shape == (6, 2) and sigma.shape == (2,) and full.Vt.shape == (5, 5)
    u, sigma, _ = csp_factorize(SessionConfig(m=6, n=5, widths=(5,), r=2, app="pca"), x)
    assert u.shape == (6, 2) and sigma.size == 0


def test_csp_sigma_equals_unmasked_sigma():
    x = np.random.default_rng(4).standard_normal((12, 9))
    p, q = generate_P(1, 12, 4), efficient_orthogonal(9, 4, SeededGaussianStream(2))
    cfg = SessionConfig(m=12, n=9, widths=(9,))
    _, sigma, _ = csp_factorize(cfg, p.to_dense() @ x @ q.to_dense())
    ref = singular_values_oracle(x)
    assert np.abs(sigma - ref).max() <= 1e-9 * ref[0]


# -- recovery ----------------------------------------------------------------------------

def test_recover_U_identity_and_shape_check():
    u = np.linalg.qr(np.random.default_rng(5).standard_normal((6, 6)))[0]
    np.testing.assert_array_equal(user_recover_U(u, BlockDiagMatrix.identity(6, 2)), u)
    with pytest.raises(DimensionMismatch):
        user_recover_U(u, BlockDiagMatrix.identity(5))


def test_recover_U_matches_centralized():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((10, 6))
    p, q = generate_P(3, 10, 4), efficient_orthogonal(6, 4, SeededGaussianStream(4))
    svd = svd_dense(p.to_dense() @ x @ q.to_dense())
    u = user_recover_U(svd.U, p)
    assert np.abs(u.T @ u - np.eye(10)).max() <= 1e-9
    ref = np.linalg.svd(x)[0][:, :6]
    assert np.abs(align(u[:, :6], ref) - ref).max() <= 1e-8


def _masked_case(seed, m, widths, b):
    rng = np.random.default_rng(seed)
    n = sum(widths)
    x = rng.standard_normal((m, n))
    p, q = generate_P(seed, m, b), efficient_orthogonal(n, b, SeededGaussianStream(seed + 1))
    strips = split_Q(q, widths)
    return x, p, q, strips, svd_dense(p.to_dense() @ x @ q.to_dense())


def test_recover_V_with_identity_R():
    x, p, q, strips, svd = _masked_case(7, 8, [2, 4], 3)
    cfg = SessionConfig(m=8, n=6, widths=(2, 4))
    for s in strips:
        eye = BlockDiagMatrix.from_blocks([np.eye(seg.width) for seg in s.segments])
        got = recover_V_roundtrip(cfg, s, eye, svd)
        np.testing.assert_allclose(got, svd.Vt @ s.to_dense().T, atol=1e-12)


def test_recover_V_random_R_matches_oracles():
    m, widths = 12, [3, 5]
    x, p, q, strips, svd = _masked_case(8, m, widths, 3)
    cfg = SessionConfig(m=m, n=8, widths=tuple(widths))
    u = user_recover_U(svd.U, p)
    for s, xi in zip(strips, split_cols(x, widths)):
        r = generate_R(s, SeededGaussianStream(100 + s.owner))
        vt = recover_V_roundtrip(cfg, s, r, svd)
        assert np.abs(vt - dense_matmul(svd.Vt, s.to_dense().T)).max() <= 1e-8
        assert np.abs((u[:, :8] * svd.sigma) @ vt[:8] - xi).max() <= 1e-8
        # m >= n: Sigma^-1 U^T X_i is an independent route to the same rows
        assert np.abs(vt[:8] - v_from_u(xi, u, svd.sigma)).max() <= 1e-8


def test_recover_V_truncated_uses_top_rows():
    x, p, q, strips, svd = _masked_case(9, 10, [4, 4], 4)
    cfg = SessionConfig(m=10, n=8, widths=(4, 4), r=3, app="lsa")
    r = generate_R(strips[0], SeededGaussianStream(1))
    vt = recover_V_roundtrip(cfg, strips[0], r, svd)
    full = recover_V_roundtrip(SessionConfig(m=10, n=8, widths=(4, 4)), strips[0], r, svd)
    assert vt.shape == (3, 4)
    np.testing.assert_allclose(vt, full[:3], atol=1e-12)


# -- full sessions -------------------------------------------------------------------------

def test_single_user_tiny_matches_centralized():
    x = np.array([[4.0, 0.0, 1.0], [1.0, 3.0, 0.0], [0.0, 1.0, 2.0], [2.0, 1.0, 1.0]])
    cfg = SessionConfig(m=4, n=3, widths=(3,), b=2)
    (res,) = run_fedsvd(cfg, [x]).results
    u, s, vt = np.linalg.svd(x)
    np.testing.assert_allclose(res.sigma, s, rtol=1e-12)
    assert np.abs(align(res.U[:, :3], u[:, :3]) - u[:, :3]).max() <= 1e-10
    assert np.abs(align(res.Vt_local.T, vt.T) - vt.T).max() <= 1e-10


def test_two_users_reconstruct_their_blocks():
    x = np.random.default_rng(10).standard_normal((6, 4))
    cfg = SessionConfig(m=6, n=4, widths=(2, 2), b=2)
    out = run_fedsvd(cfg, split_cols(x, (2, 2)))
    for res, xi in zip(out.results, split_cols(x, (2, 2))):
        assert res.Vt_local.shape == (4, 2)
        assert np.abs(reconstruct(res) - xi).max() <= 1e-8
    # everyone shares U and sigma
    assert out.results[0].U.tobytes() == out.results[1].U.tobytes()


def test_wide_matrix_thin_mode():
    x = np.random.default_rng(11).standard_normal((5, 30))
    cfg = SessionConfig(m=5, n=30, widths=(13, 17), b=4, full_matrices=False)
    out = run_fedsvd(cfg, split_cols(x, (13, 17)))
    for res, xi in zip(out.results, split_cols(x, (13, 17))):
        assert res.Vt_local.shape == (5, xi.shape[1])
        assert np.abs(reconstruct(res) - xi).max() <= 1e-8


def test_recover_flags():
    x = np.random.default_rng(12).standard_normal((6, 5))
    cfg = SessionConfig(m=6, n=5, widths=(2, 3), recover_V=False, recover_U=False)
    out = run_fedsvd(cfg, split_cols(x, (2, 3)))
    assert all(r.U is None and r.Vt_local is None for r in out.results)
    assert all(f.msg_type != MsgType.MASKED_QIR for _, _, f in out.frames[CSP])


def test_block_shape_mismatch():
    cfg = SessionConfig(m=6, n=5, widths=(2, 3))
    with pytest.raises(ConfigError):
        run_fedsvd(cfg, [np.ones((6, 5))])
    with pytest.raises(DimensionMismatch):
        run_fedsvd(cfg, [np.ones((6, 3)), np.ones((6, 2))], timeout=2)


# -- information boundary --------------------------------------------------------------------

CSP_INBOX = {"MASKED_BATCH", "MASKED_QIR"}
USER_INBOX = {"SEED_P", "STRIP_Q", "PAIR_SEEDS", "RESULT_U_SIGMA", "MASKED_VIR"}


@pytest.mark.parametrize("app", ["svd", "lsa", "pca"])
def test_message_inventory(app):
    x = np.random.default_rng(13).standard_normal((9, 7))
    cfg = SessionConfig(m=9, n=7, widths=(3, 2, 2), b=3, app=app, r=None if app == "svd" else 2,
                        batch_budget_bytes=3 * 7 * 8, recover_V=app != "pca")
    out = run_fedsvd(cfg, split_cols(x, cfg.widths))
    recv = {role: {e.msg_type for e in entries if e.direction == "recv"}
            for role, entries in out.transcripts.items()}
    assert recv[TA] == set()
    assert recv[CSP] <= CSP_INBOX
    for i in range(cfg.k):
        assert recv[user_name(i)] <= USER_INBOX
    # users only ever talk to the TA (inbound) and the CSP
    for i in range(cfg.k):
        assert {e.peer for e in out.transcripts[user_name(i)]} <= {TA, CSP}


def test_full_v_prime_never_reaches_users():
    x = np.random.default_rng(14).standard_normal((8, 10))
    cfg = SessionConfig(m=8, n=10, widths=(4, 6), b=3)
    out = run_fedsvd(cfg, split_cols(x, cfg.widths))
    vt = out.csp.svd.Vt
    needle_full, needle_row = vt.tobytes(), vt[0].tobytes()
    for i in range(cfg.k):
        for direction, _, frame in out.frames[user_name(i)]:
            if direction != "recv":
                continue
            assert needle_full not in frame.payload and needle_row not in frame.payload
            if frame.msg_type == MsgType.MASKED_VIR:
                assert len(frame.payload) < vt.nbytes


def test_transcripts_replay_and_transport_agnostic():
    x = np.random.default_rng(15).standard_normal((7, 6))
    cfg = SessionConfig(m=7, n=6, widths=(2, 4), b=2, master_seed=99, batch_budget_bytes=2 * 6 * 8)
    blocks = split_cols(x, cfg.widths)
    a, b = run_fedsvd(cfg, blocks), run_fedsvd(cfg, blocks)
    tcp = run_fedsvd(cfg, blocks, transport="tcp")
    assert a.transcript_text() == b.transcript_text() == tcp.transcript_text()
    assert a.bytes_sent == tcp.bytes_sent
    for ra, rt in zip(a.results, tcp.results):
        assert ra.U.tobytes() == rt.U.tobytes() and ra.Vt_local.tobytes() == rt.Vt_local.tobytes()


def test_different_seed_changes_transcript():
    x = np.random.default_rng(16).standard_normal((5, 4))
    blocks = split_cols(x, (2, 2))
    a = run_fedsvd(SessionConfig(m=5, n=4, widths=(2, 2), master_seed=1), blocks)
    b = run_fedsvd(SessionConfig(m=5, n=4, widths=(2, 2), master_seed=2), blocks)
    assert a.transcript_text() != b.transcript_text()


# -- failure handling ---------------------------------------------------------------------

def test_missing_party_aborts_everyone():
    cfg = SessionConfig(m=4, n=4, widths=(2, 2))
    net = InMemoryNetwork()
    csp, u0, u1 = net.endpoint(CSP), net.endpoint(user_name(0)), net.endpoint(user_name(1))
    plan = PairwiseMaskPlan.from_stream(2, SeededGaussianStream(0))
    u0.send(CSP, msg.encode_masked_batch(1, 0, (0, 4), mask_batch(plan, 0, 0, np.zeros((4, 4)), cfg.codec)))
    with pytest.raises(MissingParty):
        run_csp(cfg, csp, timeout=0.05)
    for ep in (u0, u1):
        with pytest.raises(ProtocolAborted):
            msg.expect(ep.recv(CSP, timeout=1), MsgType.RESULT_U_SIGMA)


def test_batch_out_of_order_is_rejected():
    cfg = SessionConfig(m=4, n=2, widths=(2,), batch_budget_bytes=2 * 2 * 8)
    net = InMemoryNetwork()
    csp, u0 = net.endpoint(CSP), net.endpoint(user_name(0))
    u0.send(CSP, msg.encode_masked_batch(1, 1, (2, 4), cfg.codec.encode(np.zeros((2, 2)))))
    with pytest.raises(MissingParty):
        csp_collect(cfg, csp, timeout=0.05)


def test_generate_P_identical_across_processes():
    code = ("import sys; from fedsvd.masks import generate_P; "
            "sys.stdout.write(generate_P(2024, 50, 7).to_dense().tobytes().hex())")
    runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)]
    assert runs[0] == runs[1] == generate_P(2024, 50, 7).to_dense().tobytes().hex()
