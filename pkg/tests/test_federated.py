import json
import math

import numpy as np
import pytest

from gradsan.accountant import PrivacyLedger
from gradsan.central import TrainConfig, train
from gradsan.data import make_glyphs, make_ring
from gradsan.federated import (
    HEADER_BYTES,
    RAW_GRADS,
    SAMPLES,
    SANITIZED_GRADS,
    Channel,
    GradPayload,
    WireError,
    WireStats,
    bug_scenario,
    check_conservation,
    client_update,
    clients_from_shards,
    comm_ratio,
    decode_frame,
    encode_frame,
    make_clients,
    payload_frame_bytes,
    samples_frame_bytes,
    server_train,
)
from gradsan.gan import upstream_grads
from gradsan.sanitizer import Mechanism

TINY = dict(latent_dim=4, gen_hidden=(8,), disc_hidden=(8,), n_dis=2, batch_size=8, lr_d=0.01, lr_g=1e-3,
            warm_steps=0, metrics_every=0)
IDENTITY = dict(sigma=0.0, clip_bound=math.inf, non_private=True)


def ring(seed=1):
    return make_ring(8, 40, 2.0, 0.05, seed=seed)


def test_frame_roundtrip_and_layout():
    buf = encode_frame(7, SAMPLES, [1.5, -2.0, 3.0])
    assert len(buf) == HEADER_BYTES + 24 == 37
    assert buf[:8] == (7).to_bytes(8, "little") and buf[8] == SAMPLES
    assert buf[9:13] == (3).to_bytes(4, "little")
    f = decode_frame(buf)
    assert (f.step, f.kind) == (7, SAMPLES)
    np.testing.assert_array_equal(f.values, [1.5, -2.0, 3.0])
    assert len(encode_frame(0, RAW_GRADS, [])) == HEADER_BYTES


def test_malformed_frames_are_rejected():
    buf = encode_frame(1, SAMPLES, [1.0, 2.0])
    with pytest.raises(WireError, match="shorter"):
        decode_frame(buf[:5])
    with pytest.raises(WireError, match="declares"):
        decode_frame(buf[:-1])
    with pytest.raises(WireError, match="kind"):
        decode_frame(buf[:8] + b"\x09" + buf[9:])
    with pytest.raises(WireError, match="kind"):
        encode_frame(1, 42, [])


def test_frame_size_arithmetic():
    assert payload_frame_bytes(32, 2) == 32 * 2 * 8 + 13 == 525
    assert samples_frame_bytes(32, 2) == 32 * 3 * 8 + 13 == 781


def test_payload_cannot_be_built_without_a_mechanism():
    with pytest.raises(TypeError):
        GradPayload(0, np.zeros((2, 2)), True)


def test_identity_payload_equals_raw_gradients():
    cfg = TrainConfig(**{**TINY, **IDENTITY, "gamma": 1.0})
    (client,) = make_clients(ring(), cfg)
    rng = np.random.default_rng(0)
    fake, labels = rng.normal(size=(8, 2)), rng.integers(8, size=8)
    p = client_update(client, fake, labels, step=3)
    raw = upstream_grads(client.template.disc_spec, client.disc_params, fake, labels, 8)
    assert p.grads.tobytes() == raw.tobytes()
    assert p.kind == RAW_GRADS and not p.private and p.step == 3
    assert p.nbytes == len(p.to_frame()) == payload_frame_bytes(8, 2)


def test_private_payload_is_flagged():
    p = GradPayload.sanitize(1, np.ones((4, 2)), Mechanism(1.0, 1.0, rng_seed=0))
    assert p.private and p.kind == SANITIZED_GRADS


def test_intermediate_calls_return_nothing():
    cfg = TrainConfig(**{**TINY, "gamma": 1.0})
    (client,) = make_clients(ring(), cfg)
    assert client_update(client, np.zeros((8, 2)), np.zeros(8, int), final=False) is None


def test_identical_clients_send_identical_payloads():
    cfg = TrainConfig(**{**TINY, "gamma": 0.5, "sigma": 1.07})
    data = ring()
    a, b = clients_from_shards([data, data], cfg)
    # give both the same critic and noise streams
    b.site = type(a.site)(0, data, cfg, a.template)
    rng = np.random.default_rng(0)
    fake, labels = rng.normal(size=(8, 2)), rng.integers(8, size=8)
    pa = client_update(a, fake, labels)
    pb = client_update(b, fake, labels)
    assert pa.grads.tobytes() == pb.grads.tobytes()


def test_one_client_federated_run_matches_centralized_run():
    cfg = TrainConfig(**{**TINY, **IDENTITY, "gamma": 1.0, "steps": 40, "warm_steps": 3})
    fed = server_train(make_clients(ring(), cfg), cfg)
    cen = train(ring(), cfg)
    assert fed.checkpoint.to_bytes() == cen.checkpoint.to_bytes()


def test_federated_ledger_equals_centralized_ledger():
    cfg = TrainConfig(**{**TINY, "gamma": 0.25, "sigma": 1.07, "steps": 25})
    fed = server_train(make_clients(ring(), cfg), cfg)
    cen = train(ring(), cfg)
    assert fed.ledger.eps_at_order.tobytes() == cen.ledger.eps_at_order.tobytes()
    assert fed.epsilon == cen.epsilon
    ref = PrivacyLedger(0.25, 8, 1.07)
    ref.accumulate(25)
    assert fed.ledger.to_dp() == ref.to_dp()


def test_wire_bytes_and_conservation():
    cfg = TrainConfig(**{**TINY, "gamma": 0.5, "sigma": 1.07, "steps": 12})
    clients = make_clients(ring(), cfg)
    res = server_train(clients, cfg)
    check_conservation(clients, res.wire)
    rows = res.wire.per_step()
    assert [r["step"] for r in rows] == list(range(1, 13))
    for r in rows:
        assert r["down_bytes"] == cfg.n_dis * samples_frame_bytes(8, 2)
        assert r["up_bytes"] == payload_frame_bytes(8, 2)
        assert r["messages"] == cfg.n_dis + 1
    assert res.wire.down_total + res.wire.up_total == sum(m[3] for m in res.wire.messages)
    assert {m[2] for m in res.wire.messages if m[1] == "up"} == {SANITIZED_GRADS}


def test_wire_csv(tmp_path):
    stats = WireStats()
    stats.add(1, "down", SAMPLES, 100)
    stats.add(1, "up", SANITIZED_GRADS, 40)
    stats.add(2, "down", SAMPLES, 100)
    path = tmp_path / "wire.csv"
    stats.write_csv(path)
    assert path.read_text().splitlines() == ["step,down_bytes,up_bytes,messages", "1,100,40,2", "2,100,0,1"]


def test_channel_rejects_raw_gradients_in_private_mode():
    cfg = TrainConfig(**{**TINY, "gamma": 1.0})
    (client,) = make_clients(ring(), cfg)
    raw = encode_frame(1, RAW_GRADS, np.zeros(16))
    with pytest.raises(WireError, match="private mode"):
        Channel(WireStats(), private=True).audit(raw, client, "up")
    Channel(WireStats(), private=False).audit(raw, client, "up")
    with pytest.raises(WireError, match="not allowed"):
        Channel(WireStats(), private=True).audit(raw, client, "down")


def test_channel_rejects_discriminator_bytes():
    cfg = TrainConfig(**{**TINY, "gamma": 1.0})
    (client,) = make_clients(ring(), cfg)
    leak = encode_frame(1, SANITIZED_GRADS, np.concatenate([[0.5], np.ravel(client.disc_params["W0"])]))
    with pytest.raises(WireError, match="discriminator parameters"):
        Channel(WireStats(), private=True).audit(leak, client, "up")


def test_failed_clients_abort_and_charge_the_ledger(caplog):
    cfg = TrainConfig(**{**TINY, "gamma": 0.25, "sigma": 1.07, "steps": 30})
    clients = make_clients(ring(), cfg)
    with caplog.at_level("WARNING"):
        res = server_train(clients, cfg, failure_rate=0.3)
    assert res.aborted_steps, "expected some injected failures"
    assert res.steps_done == 30
    assert res.ledger.steps == 30 + len(res.aborted_steps)
    assert len(res.client_history) == res.ledger.steps
    assert "aborted" in caplog.text
    check_conservation(clients, res.wire)
    again = server_train(make_clients(ring(), cfg), cfg, failure_rate=0.3)
    assert again.checkpoint.to_bytes() == res.checkpoint.to_bytes()


def test_label_draws_do_not_depend_on_the_data():
    cfg = TrainConfig(**{**TINY, "gamma": 1.0, "sigma": 1.07, "steps": 5})

    def wire_labels(ds):
        clients = make_clients(ds, cfg)
        seen = []
        handle = clients[0].handle

        def spy(buf, final):
            seen.append(decode_frame(buf).values[-8:].copy())
            return handle(buf, final)

        clients[0].handle = spy
        server_train(clients, cfg)
        return np.concatenate(seen)

    np.testing.assert_array_equal(wire_labels(ring(1)), wire_labels(ring(2)))


def test_budget_ceiling_halts_federated_training():
    cfg = TrainConfig(**{**TINY, "gamma": 0.5, "sigma": 1.07, "steps": 50})
    ref = PrivacyLedger(0.5, 8, 1.07)
    ceiling = 0.5 * (ref.epsilon_after(4) + ref.epsilon_after(5))
    res = server_train(make_clients(ring(), cfg), TrainConfig(**{**cfg.to_dict(), "eps_ceiling": ceiling}))
    assert res.halted and res.steps_done == 4


def test_user_level_framing_is_recorded():
    cfg = TrainConfig(**{**TINY, "gamma": 0.5, "sigma": 1.07, "steps": 1})
    res = server_train(make_clients(ring(), cfg), cfg)
    assert res.notes["privacy_unit"] == "client" and res.notes["num_clients"] == 2
    with pytest.raises(ValueError):
        server_train([], cfg)


def _disc_param_count(widths):
    return sum((a + 1) * b for a, b in zip(widths, widths[1:]))


def test_communication_ratio_matches_layer_count():
    cfg = TrainConfig(gamma=1.0)
    (client,) = make_clients(make_ring(8, 10), cfg)
    n = _disc_param_count([2 + 8, 64, 64, 1])
    assert n == 4929
    assert comm_ratio(client.template, 32) == 32 * 2 / n
    assert payload_frame_bytes(32, 2) < 8 * n


def test_bug_scenario_pools_and_report():
    cfg = TrainConfig(latent_dim=4, gen_hidden=(8,), disc_hidden=(8,), n_dis=1, batch_size=4, warm_steps=0,
                      steps=3, gen_output="sigmoid", sigma=1.07, metrics_every=0)
    ds = make_glyphs(4, 80, seed=0)
    rep = bug_scenario(ds, 6, 2 / 3, cfg, n_probe=16)
    assert len(rep.suspected_clients) == len(rep.clean_clients) == 3
    assert not set(rep.suspected_clients) & set(rep.clean_clients)
    assert len(rep.flipped_clients) == 2 and set(rep.flipped_clients) <= set(rep.suspected_clients)
    json.dumps(rep.to_dict())
    assert set(rep.checkpoints) == {"suspected", "clean"}
    with pytest.raises(ValueError):
        bug_scenario(ds, 5, 0.5, cfg)


def test_scheduled_federated_run_matches_centralized_run():
    cfg = TrainConfig(**{**TINY, **IDENTITY, "gamma": 1.0, "steps": 20, "lr_g_final": 1e-5})
    assert server_train(make_clients(ring(), cfg), cfg).checkpoint.to_bytes() == train(ring(), cfg).checkpoint.to_bytes()


@pytest.mark.slow
def test_mixed_suspected_pool_is_flagged():
    cfg = TrainConfig(steps=3000, warm_steps=200, lr_d=0.01, lr_g=5e-3, sigma=1.07, gen_output="sigmoid",
                      metrics_every=0)
    rep = bug_scenario(make_glyphs(10, 2000, 0.05, seed=1), 10, 0.8, cfg)
    assert len(rep.flipped_clients) == 4
    assert rep.flagged()
