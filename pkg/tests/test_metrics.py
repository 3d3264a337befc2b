import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import unitary_group

from sdmlink import metrics
from sdmlink.metrics import AlignmentError, FecModel, MetricsReport, MdlError
from sdmlink.sigkit import MODE_ORDER, Constellation, map_symbols

C8 = Constellation.circular_8qam()
BAUD = 33.33e9


def gmi_oracle(c: Constellation, snr_db: float, order: int = 60) -> float:
    """BICM GMI of ``c`` on AWGN by tensor Gauss-Hermite quadrature over the noise."""
    n0 = 10 ** (-snr_db / 10) * np.mean(np.abs(c.points) ** 2)
    u, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    noise = np.sqrt(n0 / 2) * (u[:, None] + 1j * u[None, :]).ravel()
    weight = (w[:, None] * w[None, :]).ravel()
    bits = np.array([[(lab >> (c.m - 1 - k)) & 1 for k in range(c.m)] for lab in c.labels])
    total = 0.0
    for i, x in enumerate(c.points):
        y = x + noise
        logp = -np.abs(y[:, None] - c.points[None, :]) ** 2 / n0
        num_all = np.logaddexp.reduce(logp, axis=1)
        for k in range(c.m):
            same = bits[:, k] == bits[i, k]
            num_same = np.logaddexp.reduce(logp[:, same], axis=1)
            total += np.sum(weight * (num_all - num_same)) / np.log(2)
    return c.m - total / c.size


def _awgn(snr_db, n=241_000, seed=0, c=C8):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, c.m * n)
    s = map_symbols(bits, c)
    sigma = np.sqrt(10 ** (-snr_db / 10) / 2)
    return s + sigma * (rng.normal(size=n) + 1j * rng.normal(size=n)), bits


def test_oracle_limits():
    assert gmi_oracle(C8, 40.0) == pytest.approx(3.0, abs=1e-3)
    assert gmi_oracle(C8, -20.0) < 0.05


@pytest.mark.parametrize("snr_db", [3, 6, 10, 14, 20])
def test_gmi_matches_quadrature_oracle(snr_db):
    rx, bits = _awgn(snr_db, seed=snr_db)
    assert metrics.compute_gmi(rx, bits, C8) == pytest.approx(gmi_oracle(C8, snr_db), abs=0.01)


def test_gmi_noiseless_and_pure_noise():
    rx, bits = _awgn(200.0, n=10_000)
    assert metrics.compute_gmi(rx, bits, C8) == pytest.approx(3.0, abs=1e-3)
    rng = np.random.default_rng(9)
    noise = rng.normal(size=50_000) + 1j * rng.normal(size=50_000)
    assert metrics.compute_gmi(noise, rng.integers(0, 2, 150_000), C8) <= 0.05


def test_gmi_alignment_error_on_clean_misaligned_stream():
    rx, bits = _awgn(30.0, n=20_000)
    with pytest.raises(AlignmentError):
        metrics.compute_gmi(np.roll(rx, 17), bits, C8)


def test_gmi_length_mismatch():
    rx, bits = _awgn(10.0, n=100)
    with pytest.raises(ValueError):
        metrics.compute_gmi(rx, bits[:-1], C8)


def test_gmi_monotone_in_snr():
    g = [metrics.compute_gmi(*_awgn(s, n=60_000, seed=1), C8) for s in range(0, 21)]
    assert np.all(np.diff(g) > -0.005)
    assert all(0 <= v <= 3 for v in g)


def test_gmi_16qam_oracle():
    c = Constellation.square_qam(16)
    rx, bits = _awgn(12.0, n=100_000, c=c)
    assert metrics.compute_gmi(rx, bits, c) == pytest.approx(gmi_oracle(c, 12.0), abs=0.01)


# --- rates -----------------------------------------------------------------------


def test_fec_model():
    f = FecModel()
    assert f.code_rate == 0.8402 and f.ngmi_threshold == 0.8798
    assert round(f.overhead_pct) == 19
    with pytest.raises(ValueError):
        FecModel(code_rate=1.2)


def test_net_rate_six_and_three_modes():
    fec = FecModel()
    r6 = metrics.net_rate([2.9] * 6, BAUD, fec, n_streams=12)
    assert r6.line_rate_gbps == pytest.approx(1199.88, rel=1e-6)
    assert r6.net_rate_gbps == pytest.approx(1199.88 * 0.8402, rel=1e-6)
    assert round(r6.net_rate_gbps, 1) == 1008.1
    r3 = metrics.net_rate([2.9] * 3, BAUD, fec, n_streams=6)
    assert r3.line_rate_gbps == pytest.approx(599.94, rel=1e-6)
    assert round(r3.net_rate_gbps, 1) == 504.1


def test_below_threshold_reports_zero():
    r = metrics.net_rate([2.5] * 6, BAUD, FecModel(), n_streams=12)
    assert r.below_threshold and r.net_rate_gbps == 0.0
    assert r.ngmi == pytest.approx(2.5 / 3)


# --- MDL -------------------------------------------------------------------------


def test_mdl_identity_and_diag():
    assert metrics.compute_mdl(np.eye(4)) == pytest.approx(0.0, abs=1e-12)
    assert metrics.compute_mdl(np.diag([2.0, 1.0])) == pytest.approx(20 * np.log10(2), abs=1e-9)


def test_mdl_rank_deficient():
    with pytest.raises(MdlError):
        metrics.compute_mdl(np.diag([1.0, 0.0]))


def test_mdl_against_eigh_oracle():
    rng = np.random.default_rng(3)
    H = rng.normal(size=(512, 12, 12)) + 1j * rng.normal(size=(512, 12, 12))
    lam = np.array([np.sort(np.linalg.eigvalsh(h.conj().T @ h))[::-1] for h in H]).mean(axis=0)
    assert metrics.compute_mdl(H) == pytest.approx(10 * np.log10(lam[0] / lam[-1]), abs=1e-9)


@given(st.integers(0, 2**31), st.floats(0.01, 100.0))
@settings(max_examples=25, deadline=None)
def test_mdl_invariances(seed, scale):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(8, 6, 6)) + 1j * rng.normal(size=(8, 6, 6))
    U = unitary_group.rvs(6, random_state=seed % 2**32)
    V = unitary_group.rvs(6, random_state=(seed + 1) % 2**32)
    base = metrics.compute_mdl(H)
    assert metrics.compute_mdl(scale * H) == pytest.approx(base, abs=1e-9)
    assert metrics.compute_mdl(U @ H @ V) == pytest.approx(base, abs=1e-9)


@given(st.integers(0, 2**31), st.floats(0.1, 10.0))
@settings(max_examples=25, deadline=None)
def test_mdl_zero_for_scaled_unitaries(seed, scale):
    U = np.stack([unitary_group.rvs(4, random_state=(seed + i) % 2**32) for i in range(5)])
    assert metrics.compute_mdl(scale * U) == pytest.approx(0.0, abs=1e-9)


def _flat_channel(mdl_db, dim=12, seed=0):
    rng = np.random.default_rng(seed)
    g = 10 ** (np.linspace(0, -mdl_db, dim) / 20)
    U = unitary_group.rvs(dim, random_state=seed)
    V = unitary_group.rvs(dim, random_state=seed + 1)
    H = U @ np.diag(g) @ V
    assert metrics.compute_mdl(H) == pytest.approx(mdl_db, abs=1e-9)
    return H, rng


def _taps_from_matrix(W, L=51):
    taps = np.zeros(W.shape + (L,), dtype=complex)
    taps[..., L // 2] = W
    return taps


def test_mdl_from_taps_identity():
    assert metrics.mdl_from_taps(_taps_from_matrix(np.eye(12))) == pytest.approx(0.0, abs=1e-9)


def test_mdl_from_taps_zero_forcing_inverse():
    H, _ = _flat_channel(5.5)
    assert metrics.mdl_from_taps(_taps_from_matrix(np.linalg.inv(H))) == pytest.approx(5.5, abs=0.2)


def test_mdl_from_taps_tolerates_delayed_taps():
    H, _ = _flat_channel(3.0, dim=4, seed=5)
    taps = _taps_from_matrix(np.linalg.inv(H))
    taps = np.roll(taps, 7, axis=-1)  # a pure delay leaves the eigenvalues unchanged
    assert metrics.mdl_from_taps(taps) == pytest.approx(3.0, abs=1e-6)


@pytest.mark.parametrize("rho", [0.003, 0.02])
def test_mdl_from_taps_undoes_mmse_shrinkage(rho):
    H, _ = _flat_channel(11.0, dim=6, seed=2)
    H = 0.7 * H
    G = H.conj().T @ H + rho * np.eye(6)
    W = np.linalg.solve(G, H.conj().T)  # Wiener solution
    mse = np.trace(rho * np.linalg.inv(G)).real / 6  # its output error
    taps = _taps_from_matrix(W)
    assert metrics.mdl_from_taps(taps) < 10.5  # plain inversion reads low
    assert metrics.mdl_from_taps(taps, output_mse=mse) == pytest.approx(11.0, abs=1e-6)


def test_mdl_from_taps_zero_mse_is_plain_inverse():
    H, _ = _flat_channel(5.5)
    taps = _taps_from_matrix(np.linalg.inv(H))
    assert metrics.mdl_from_taps(taps, output_mse=0.0) == pytest.approx(metrics.mdl_from_taps(taps))


def test_mdl_from_taps_singular():
    with pytest.raises(MdlError):
        metrics.mdl_from_taps(_taps_from_matrix(np.diag([1.0, 0.0])))


# --- crosstalk -------------------------------------------------------------------


def test_crosstalk_identity():
    xt = metrics.crosstalk_matrices(_taps_from_matrix(np.eye(12)), MODE_ORDER, MODE_ORDER)
    d = xt.spatial_db
    assert np.allclose(np.diag(d), 0.0)
    assert np.all(d[~np.eye(6, dtype=bool)] == metrics.XT_FLOOR_DB)
    assert xt.group.shape == (3, 3)


def test_crosstalk_block_diagonal_groups():
    rng = np.random.default_rng(0)
    W = np.zeros((12, 12), dtype=complex)
    for sl in (slice(0, 2), slice(2, 6), slice(6, 12)):
        n = sl.stop - sl.start
        W[sl, sl] = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    xt = metrics.crosstalk_matrices(_taps_from_matrix(W), MODE_ORDER, MODE_ORDER)
    g = xt.group_db
    assert np.all(g[~np.eye(3, dtype=bool)] == metrics.XT_FLOOR_DB)
    assert np.all(np.diag(g) > -20)


def test_crosstalk_orientation_and_averaging():
    # 3 transmitted modes received on 6: one strong path LP01 -> LP21a
    tx, rx = MODE_ORDER[:3], MODE_ORDER
    taps = np.zeros((6, 12, 3), dtype=complex)
    taps[0, 6, 1] = 1.0  # output stream LP01X taps receiver LP21aX
    taps[0, 6, 0] = 1.0  # summed over taps before squaring -> 4
    taps[1, 7, 1] = 2.0
    xt = metrics.crosstalk_matrices(taps, tx, rx)
    assert xt.spatial.shape == (6, 3)
    assert xt.spatial[3, 0] == pytest.approx((4 + 4) / 4)
    assert xt.group.shape == (3, 2)
    assert xt.group[2, 0] == pytest.approx(2.0 / 3)


def test_crosstalk_shape_mismatch():
    with pytest.raises(ValueError):
        metrics.crosstalk_matrices(np.zeros((6, 10, 3)), MODE_ORDER[:3], MODE_ORDER)


# --- reports ---------------------------------------------------------------------


def _report(g, capture=0, **kw):
    return MetricsReport.from_streams([g] * 12, MODE_ORDER, BAUD, FecModel(), power_dbm=0.0, k_rx=6,
                                      capture=capture, mdl_db=11.0, **kw)


def test_average_two_reports():
    avg = metrics.average_captures([_report(2.0), _report(3.0, capture=1)])
    np.testing.assert_allclose(avg.gmi_per_mode, 2.5)
    assert avg.capture == "mean" and avg.n_captures == 2
    assert avg.ngmi == pytest.approx(2.5 / 3)


def test_average_rejects_mixed_configs():
    other = MetricsReport.from_streams([2.0] * 12, MODE_ORDER, BAUD, FecModel(), power_dbm=3.0, k_rx=6,
                                       capture=1, mdl_db=11.0)
    with pytest.raises(ValueError):
        metrics.average_captures([_report(2.0), other])


def test_average_crosstalk_linear_domain():
    a = metrics.crosstalk_matrices(_taps_from_matrix(np.eye(12)), MODE_ORDER, MODE_ORDER)
    b = metrics.crosstalk_matrices(_taps_from_matrix(np.ones((12, 12))), MODE_ORDER, MODE_ORDER)
    avg = metrics.average_captures([_report(2.0, crosstalk=a), _report(2.0, capture=1, crosstalk=b)])
    np.testing.assert_allclose(avg.crosstalk.spatial, (a.spatial + b.spatial) / 2)


def test_report_json_roundtrip():
    xt = metrics.crosstalk_matrices(_taps_from_matrix(np.eye(12)), MODE_ORDER, MODE_ORDER)
    r = _report(2.7, crosstalk=xt, snr_db=17.5, extra={"status": "ok"})
    back = MetricsReport.from_json(r.to_json())
    np.testing.assert_array_equal(back.gmi_per_mode, r.gmi_per_mode)
    np.testing.assert_array_equal(back.crosstalk.spatial, r.crosstalk.spatial)
    assert back.net_rate_gbps == r.net_rate_gbps and back.extra == r.extra


def test_csv_rows_and_text():
    rows = _report(2.9).csv_rows()
    assert len(rows) == 6 and rows[0]["mode"] == "LP01"
    text = metrics.rows_to_csv(rows)
    lines = text.strip().splitlines()
    assert lines[0].split(",") == list(metrics.CSV_COLUMNS)
    assert len(lines) == 7
