import numpy as np
import pytest

import coflow


def test_byte_accounting():
    assert coflow.early_fusion_bytes(100000) == 1_600_000
    assert coflow.late_fusion_bytes(10) == 320
    assert coflow.tensor_payload_bytes([100, 100, 100]) == 4_000_000


def test_simulate_is_deterministic():
    a = coflow.simulate(seed=3, duration=0.5, n_objects=4)
    b = coflow.simulate(seed=3, duration=0.5, n_objects=4)
    assert len(a) == 5
    assert a[0]["infra_cloud"].shape[1] == 4
    np.testing.assert_array_equal(a[-1]["infra_cloud"], b[-1]["infra_cloud"])
    assert len(a[0]["boxes"]) == 4


def test_flow_loss_matches_numpy():
    rng = np.random.default_rng(0)
    f = rng.uniform(0, 1, (3, 5, 5)).astype(np.float32)
    d = rng.uniform(-2, 2, (3, 5, 5)).astype(np.float32)
    t = rng.uniform(-1, 1, (3, 5, 5)).astype(np.float32)
    p = f.astype(np.float64) + 0.2 * d
    p *= np.abs(f).sum() / np.abs(p).sum()
    want = 1 - (p * t).sum() / np.linalg.norm(p) / np.linalg.norm(t)
    assert coflow.flow_loss(f, d, t, 0.2) == pytest.approx(want, abs=1e-5)


def test_message_roundtrip_and_rejection():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((12, 6, 6)).astype(np.float32)
    d = rng.standard_normal((12, 6, 6)).astype(np.float32)
    out = coflow.message_roundtrip(f, d, t_i=1.25)
    np.testing.assert_array_equal(out["feature"], f)
    np.testing.assert_array_equal(out["derivative"], d)
    assert out["payload_bytes"] == 2 * 12 * 6 * 6 * 4
    assert out["t_i"] == 1.25
    assert coflow.message_roundtrip(f)["derivative"] is None
    with pytest.raises(coflow.FormatError):
        coflow.parse_message(out["bytes"][:-3])


def test_average_precision_half_recall():
    assert coflow.average_precision([(0.9, True), (0.8, True)], 4) == pytest.approx(6 / 11)


def test_variants_and_verify():
    assert "FFNet" in coflow.variants()
    failed = [name for name, ok, _ in coflow.verify() if not ok]
    assert failed == []
