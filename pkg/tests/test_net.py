import numpy as np
import pytest

from mansu.net import (REFUSAL_TOKEN, Checkpoint, CheckpointFormatError, NetDims, NumericError, TrainingError,
                       accuracy, generate_facts, init_params, load_checkpoint, loss_and_grads, predict,
                       save_checkpoint, train_base)

OBJ = ("cross-entropy", "negated-cross-entropy", "kl-to-reference")


def fd_check(dims, data, seed, objective, n_coords=40, h=1e-5):
    rng = np.random.default_rng(seed)
    ref = init_params(dims, rng)
    params = ref + 0.3 * rng.normal(size=ref.size) * (objective == "kl-to-reference")
    ck = Checkpoint(dims, params, ref)
    batch = rng.choice(len(data.facts), size=5, replace=False)
    _, g = loss_and_grads(ck, data, batch, objective)
    idx = rng.choice(dims.n_params, size=n_coords, replace=False)
    num = np.empty(n_coords)
    for j, i in enumerate(idx):
        e = np.zeros(dims.n_params)
        e[i] = h
        lp, _ = loss_and_grads(ck, data, batch, objective, params=params + e)
        lm, _ = loss_and_grads(ck, data, batch, objective, params=params - e)
        num[j] = (lp - lm) / (2 * h)
    return g[idx], num


def relative_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6))


@pytest.mark.parametrize("config", range(20))
def test_gradient_matches_finite_differences(config):
    rng = np.random.default_rng(100 + config)
    dims = NetDims(vocab=16 + 8 * int(rng.integers(0, 3)), width=int(rng.integers(3, 9)),
                   hidden=int(rng.integers(3, 9)), depth=int(rng.integers(1, 4)))
    data = generate_facts(config, 4, 8, dims.vocab)
    for obj in OBJ:
        a, n = fd_check(dims, data, config, obj)
        assert relative_error(a, n) <= 1e-4, obj


def test_kl_zero_at_reference():
    dims = NetDims(16, 4, 5, 2)
    data = generate_facts(0, 3, 5, 16)
    ref = init_params(dims, np.random.default_rng(0))
    loss, g = loss_and_grads(Checkpoint(dims, ref, ref.copy()), data, [0, 1, 2], "kl-to-reference")
    assert loss == 0.0 and not np.any(g)


def test_kl_nonnegative(rng):
    dims = NetDims(16, 4, 5, 2)
    data = generate_facts(0, 3, 5, 16)
    ref = init_params(dims, rng)
    for _ in range(10):
        ck = Checkpoint(dims, ref + rng.normal(size=ref.size), ref)
        assert loss_and_grads(ck, data, np.arange(8), "kl-to-reference")[0] >= 0


def test_loss_errors():
    dims = NetDims(16, 4, 5, 2)
    data = generate_facts(0, 3, 5, 16)
    ref = init_params(dims, np.random.default_rng(0))
    ck = Checkpoint(dims, ref, ref.copy())
    with pytest.raises(ValueError):
        loss_and_grads(ck, data, [], "cross-entropy")
    with pytest.raises(ValueError):
        loss_and_grads(ck, data, [0], "mse")
    with pytest.raises(NumericError):
        loss_and_grads(ck, data, [0], "cross-entropy", params=ref * 1e200)


def test_confident_prediction_has_near_zero_loss():
    dims = NetDims(64, 8, 5, 1)
    data = generate_facts(0, 0, 20, 64)
    _, first = np.unique(data.facts[:, 0], return_index=True)
    idx = first[:8]
    flat = np.zeros(dims.n_params)
    lay = dims.layout()
    E = np.zeros((64, 8)); R = np.zeros((8, 64))
    # one-hot subject embeddings, readout maps each to its stored answer
    for k, (s, r, a) in enumerate(data.facts[idx]):
        E[s, k] = 1.0
        R[k, a] = 60.0
    flat[lay["embed"][0]] = E.ravel(); flat[lay["readout"][0]] = R.ravel()
    loss, _ = loss_and_grads(Checkpoint(dims, flat, flat.copy()), data, idx, "cross-entropy")
    assert loss < 1e-20


def test_dataset_contract():
    d = generate_facts(42, 10, 40, 64)
    assert len(d.facts) == 50
    assert len({tuple(f) for f in d.facts[:, :2]}) == 50
    assert len(d.forget_indices) == 10 and len(d.corrupted) == 10
    assert not set(d.forget_indices) & set(d.retain_indices)
    clean = d.facts[d.forget_indices]
    assert np.all(d.corrupted[:, 1] == clean[:, 1])
    assert np.all(d.corrupted[:, 2] != clean[:, 2])
    assert d.corrupted.shape[1] == clean.shape[1]
    assert not np.any(d.facts[:, 2] == REFUSAL_TOKEN)
    e = generate_facts(42, 10, 40, 64)
    assert d.fingerprint() == e.fingerprint() and np.array_equal(d.facts, e.facts)


def test_empty_forget_split():
    d = generate_facts(42, 0, 10, 64)
    assert len(d.forget_indices) == 0 and len(d.retain_indices) == 10 and d.corrupted.shape == (0, 3)


@pytest.mark.parametrize("args", [(0, 100, 100, 64), (0, 1, 1, 8), (0, -1, 3, 64)])
def test_infeasible_dataset(args):
    with pytest.raises(ValueError):
        generate_facts(*args)


def test_base_training_contract(base, data):
    assert base.info["forget_acc"] >= 0.95 and base.info["retain_acc"] >= 0.95
    assert np.array_equal(base.params, base.reference)


def test_base_training_deterministic(dims, data, base):
    again = train_base(dims, data, seed=0)
    assert again == base


def test_train_base_rejects_bad_args(dims, data):
    with pytest.raises(ValueError):
        train_base(dims, data, steps=0)
    with pytest.raises(ValueError):
        train_base(dims, data, lr=0)


def test_train_base_divergence_reports_step():
    dims = NetDims(16, 4, 5, 2)
    data = generate_facts(0, 3, 5, 16)
    with pytest.raises(TrainingError) as err:
        train_base(dims, data, steps=50, lr=1e300, target_loss=None)
    assert err.value.step is not None


def test_argmax_ties_go_to_lowest_token(dims, data):
    flat = init_params(dims, np.random.default_rng(0))
    flat[dims.layout()["readout"][0]] = 0.0
    pred = predict(dims, flat, data.inputs())
    assert np.all(pred == 0)
    assert accuracy(dims, flat, data, data.retain_indices) == np.mean(data.answers(data.retain_indices) == 0)


def test_checkpoint_round_trip(tmp_path, base):
    ck = base.copy(params=base.params + 1e-3)
    save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back == ck
    assert back.params.tobytes() == ck.params.tobytes()
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_header_layout(tmp_path, base):
    import struct
    save_checkpoint(base, tmp_path / "c.ckpt")
    raw = (tmp_path / "c.ckpt").read_bytes()
    magic, version, V, D, H, L, seed = struct.unpack_from("<4sIIIIIQ", raw)
    assert (magic, version, V, D, H, L, seed) == (b"MNSU", 1, 64, 32, 64, 8, 0)
    assert len(raw) == 32 + 16 * base.dims.n_params + 4


@pytest.mark.parametrize("where", ["magic", "body", "truncate"])
def test_corrupted_checkpoint_rejected(tmp_path, base, where):
    p = tmp_path / "d.ckpt"
    save_checkpoint(base, p)
    raw = bytearray(p.read_bytes())
    if where == "magic":
        raw[0:4] = b"XXXX"
    elif where == "body":
        raw[100] ^= 0xFF
    else:
        raw = raw[:20]
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)


def test_checkpoint_shape_validation():
    dims = NetDims(16, 4, 5, 2)
    with pytest.raises(ValueError):
        Checkpoint(dims, np.zeros(3), np.zeros(3))
