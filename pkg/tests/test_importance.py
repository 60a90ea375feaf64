import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poplab.errors import ConfigError, ContractError, DataError
from poplab.importance import (
    CalibSample,
    ImportanceProfile,
    brute_force_delta_loss,
    delta_loss_sweep,
    estimate_importance,
    freeze_targets,
    gate_gradients,
    heldout_calibration,
    load_calibration_jsonl,
    rank_correlation,
    sample_loss,
    sample_targets,
)
from poplab.model import GateSchedule, ModelConfig, forward, init_model
from poplab.tokenizer import BOS, encode


def zero_branch(w, layer):
    lw = w.layers[layer]
    return w.replace_layer(layer, wo=np.zeros_like(lw.wo), w_down=np.zeros_like(lw.w_down))


def small_set(w, n=3, seed=0, prompt_len=6, max_len=5):
    rng = np.random.default_rng(seed)
    samples = [CalibSample([BOS] + list(rng.integers(3, 259, prompt_len - 1))) for _ in range(n)]
    return freeze_targets(w, samples, max_len=max_len, seed=seed)


# ---------------------------------------------------------------- targets


def test_sample_targets_seeded(tiny_weights):
    p = encode("ab")
    assert sample_targets(tiny_weights, p, 8, seed=3) == sample_targets(tiny_weights, p, 8, seed=3)


def test_sample_targets_max_len_one(tiny_weights):
    assert len(sample_targets(tiny_weights, encode("ab"), 1, seed=0)) == 1


@pytest.mark.parametrize("temp", [0.0, -0.5])
def test_sample_targets_needs_positive_temperature(tiny_weights, temp):
    with pytest.raises(ConfigError):
        sample_targets(tiny_weights, encode("a"), 4, temperature=temp)


def test_sample_targets_match_softmax(tiny_weights):
    n = 10_000
    logits = forward(tiny_weights, [BOS]).data[-1]
    p = np.exp(logits - logits.max())
    p /= p.sum()
    draws = [sample_targets(tiny_weights, [BOS], 1, 1.0, seed=s)[0] for s in range(n)]
    counts = np.bincount(draws, minlength=len(p))
    sigma = np.sqrt(n * p * (1 - p))
    z = np.abs(counts - n * p) / sigma
    assert np.all(z <= 3.0), float(z.max())


# ---------------------------------------------------------------- gate gradients


def central_gate_diff(w, sample, stage, layer, h=1e-4):
    L = w.config.num_layers

    def loss_at(g):
        gp, gd = np.ones(L), np.ones(L)
        (gp if stage == "prefill" else gd)[layer] = g
        return sample_loss(w, sample, GateSchedule(sample.N, gp, gd))

    return (loss_at(1 + h) - loss_at(1 - h)) / (2 * h)


def test_gradients_match_finite_differences(tiny_weights):
    s = small_set(tiny_weights, n=1)[0]
    g = gate_gradients(tiny_weights, s)
    for stage, vals in (("prefill", g.prefill), ("decode", g.decode)):
        for l in range(3):
            fd = central_gate_diff(tiny_weights, s, stage, l)
            assert abs(vals[l] - fd) <= 1e-4 * max(abs(fd), abs(vals[l])), (stage, l)


def test_zero_branch_layer_has_zero_gradient(tiny_weights):
    w = zero_branch(tiny_weights, 1)
    g = gate_gradients(w, small_set(w, n=1)[0])
    assert g.prefill[1] == 0.0 and g.decode[1] == 0.0
    assert np.all(g.decode[[0, 2]] != 0)


def test_shared_gate_is_sum_of_stages(tiny_weights):
    s = small_set(tiny_weights, n=1)[0]
    aware = gate_gradients(tiny_weights, s, stage_aware=True)
    shared = gate_gradients(tiny_weights, s, stage_aware=False)
    assert np.allclose(shared.prefill, aware.prefill + aware.decode, rtol=1e-10, atol=1e-14)
    assert np.array_equal(shared.prefill, shared.decode)


def test_single_token_prompt_has_no_prefill_gradient(tiny_weights):
    s = CalibSample([BOS], sampled=[80, 90, 100])
    g = gate_gradients(tiny_weights, s)
    assert g.prefill_empty
    assert np.all(g.prefill == 0.0)
    assert np.any(g.decode != 0.0)


def test_sample_without_response(tiny_weights):
    with pytest.raises(ContractError):
        gate_gradients(tiny_weights, CalibSample([BOS, 70]))


# ---------------------------------------------------------------- profile


def test_zero_branch_layer_scores_zero(tiny_weights):
    w = zero_branch(tiny_weights, 2)
    prof = estimate_importance(w, small_set(w), seed=1)
    assert prof.prefill_score[2] <= 1e-18 and prof.decode_score[2] <= 1e-18


def test_profile_recomputes_from_kept_gradients(tiny_weights):
    prof = estimate_importance(tiny_weights, small_set(tiny_weights, n=4), keep_grads=True)
    g = prof.per_sample
    assert g.shape == (4, 2, 3)
    assert np.array_equal(prof.prefill_score, np.mean(g[:, 0] ** 2, axis=0))
    assert np.array_equal(prof.decode_score, np.mean(g[:, 1] ** 2, axis=0))


def test_profile_independent_of_workers(tiny_weights):
    samples = [CalibSample(s.prompt) for s in small_set(tiny_weights, n=5)]
    a = estimate_importance(tiny_weights, samples, seed=9, max_len=6, workers=1)
    b = estimate_importance(tiny_weights, samples, seed=9, max_len=6, workers=3)
    assert a.to_dict() == b.to_dict()


def test_profile_reuses_frozen_targets(tiny_weights):
    frozen = small_set(tiny_weights, n=3, seed=4)
    a = estimate_importance(tiny_weights, frozen, seed=4, max_len=5)
    b = estimate_importance(tiny_weights, [CalibSample(s.prompt) for s in frozen], seed=4, max_len=5)
    assert a.to_dict() == b.to_dict()


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**16), st.booleans())
def test_scores_nonnegative(seed, aware):
    cfg = ModelConfig(num_layers=2, hidden=16, num_heads=4, num_kv_heads=2, head_dim=4, ffn_dim=32, max_seq=64)
    w = init_model(cfg, seed)
    prof = estimate_importance(w, [CalibSample([BOS, 70, 80])], stage_aware=aware, seed=seed, max_len=4)
    assert np.all(prof.prefill_score >= 0) and np.all(prof.decode_score >= 0)


def test_stage_agnostic_profile_mirrors_fields(tiny_weights):
    prof = estimate_importance(tiny_weights, small_set(tiny_weights), stage_aware=False)
    assert np.array_equal(prof.prefill_score, prof.decode_score)
    assert not prof.stage_aware


def test_profile_json_roundtrip(tmp_path, tiny_weights):
    prof = estimate_importance(tiny_weights, small_set(tiny_weights), keep_grads=True)
    prof.save(tmp_path / "p.json")
    back = ImportanceProfile.load(tmp_path / "p.json")
    assert back.to_dict() == prof.to_dict()
    layers = back.to_dict()["layers"]
    assert set(layers[0]) == {
        "index", "prefill_score", "decode_score", "prefill_grad_mean",
        "decode_grad_mean", "prefill_grad_se", "decode_grad_se",
    }


def test_empty_calibration_set(tiny_weights):
    with pytest.raises(DataError):
        estimate_importance(tiny_weights, [])


def test_malformed_profile(tmp_path):
    (tmp_path / "p.json").write_text('{"layers": [{"index": 0}]}')
    with pytest.raises(DataError):
        ImportanceProfile.load(tmp_path / "p.json")


# ---------------------------------------------------------------- calibration input


def test_heldout_calibration_shape():
    cal = heldout_calibration(5, prompt_bytes=64, seed=2)
    assert len(cal) == 5
    assert all(c.N == 65 and c.prompt[0] == BOS and len(c.response) == 64 for c in cal)
    assert [c.prompt for c in cal] == [c.prompt for c in heldout_calibration(5, 64, seed=2)]


def test_calibration_jsonl(tmp_path):
    p = tmp_path / "cal.jsonl"
    p.write_text('{"prompt": "Hi"}\n\n{"prompt": "a", "response": "b"}\n')
    cal = load_calibration_jsonl(p)
    assert cal[0].prompt == [1, 75, 108] and cal[0].response is None
    assert cal[1].response == [101]


def test_calibration_jsonl_malformed(tmp_path):
    p = tmp_path / "cal.jsonl"
    p.write_text('{"text": "x"}\n')
    with pytest.raises(DataError):
        load_calibration_jsonl(p)


# ---------------------------------------------------------------- oracle


def test_zero_branch_delta_loss_is_zero(tiny_weights):
    w = zero_branch(tiny_weights, 0)
    samples = small_set(w)
    for stage in ("prefill", "decode", "both"):
        assert brute_force_delta_loss(w, samples, 0, stage) == 0.0


def test_delta_loss_invalid_layer(tiny_weights):
    with pytest.raises(ContractError):
        brute_force_delta_loss(tiny_weights, small_set(tiny_weights, n=1), 3, "decode")


def test_delta_loss_sweep_matches_single_calls(tiny_weights):
    samples = small_set(tiny_weights)
    sweep = delta_loss_sweep(tiny_weights, samples)
    assert sweep["decode"][1] == brute_force_delta_loss(tiny_weights, samples, 1, "decode")
    assert sweep["prefill"].shape == (3,)


def test_delta_loss_matches_direct_difference(tiny_weights):
    s = small_set(tiny_weights, n=1)[0]
    gd = np.ones(3)
    gd[2] = 0.0
    want = sample_loss(tiny_weights, s, GateSchedule(s.N, np.ones(3), gd)) - sample_loss(tiny_weights, s)
    assert brute_force_delta_loss(tiny_weights, [s], 2, "decode") == want


def test_rank_correlation():
    assert rank_correlation([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert rank_correlation([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    # ties average: ranks a=[1,2.5,2.5,4], b=[1,2,3,4]
    ra, rb = np.array([1, 2.5, 2.5, 4]), np.array([1, 2, 3, 4])
    want = np.corrcoef(ra, rb)[0, 1]
    assert rank_correlation([0, 1, 1, 2], [1, 2, 3, 4]) == pytest.approx(want)
    assert np.isnan(rank_correlation([1, 1, 1], [1, 2, 3]))
