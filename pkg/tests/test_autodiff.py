import numpy as np
import pytest

from decapbench import autodiff as ad
from decapbench.errors import ContractViolation


def make_rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def store_with(**arrays):
    s = ad.ParamStore()
    for name, arr in arrays.items():
        s.add(name, np.asarray(arr, dtype=np.float64))
    return s


# --- per-op gradient checks ------------------------------------------------------

def test_grad_check_elementwise_chain():
    rng = make_rng(1)
    s = store_with(a=rng.normal(size=(3, 4)), b=rng.normal(size=(3, 4)))

    def fn():
        x = ad.mul(ad.exp(s["a"]), s["b"]) + ad.relu(s["a"]) - s["b"]
        return ad.mean(ad.absolute(x) + ad.log(ad.exp(x) + ad.Tensor(2.0)))

    assert ad.grad_check(fn, s) < 1e-6


def test_grad_check_matmul_reshape_transpose():
    rng = make_rng(2)
    s = store_with(w=rng.normal(size=(4, 5)), x=rng.normal(size=(2, 3, 4)))

    def fn():
        y = ad.matmul(s["x"], s["w"])
        y = ad.transpose(ad.reshape(y, (6, 5)), (1, 0))
        return ad.tensor_sum(ad.mul(y, y))

    assert ad.grad_check(fn, s) < 1e-6


def test_grad_check_take_rows():
    rng = make_rng(3)
    s = store_with(h=rng.normal(size=(3, 5, 4)))
    idx = np.array([1, 4, 0])

    def fn():
        return ad.tensor_sum(ad.exp(ad.take_rows(s["h"], idx)))

    assert ad.grad_check(fn, s) < 1e-6


def test_grad_check_masked_log_softmax():
    rng = make_rng(4)
    s = store_with(z=rng.normal(size=(3, 6)))
    mask = np.ones((3, 6), dtype=bool)
    mask[0, 2] = mask[1, 0] = mask[1, 5] = False

    def fn():
        return ad.mean(ad.take_rows(ad.masked_log_softmax(s["z"], mask),
                                    np.array([0, 1, 3])))

    assert ad.grad_check(fn, s) < 1e-6


def test_grad_check_mha():
    rng = make_rng(5)
    d = 8
    s = store_with(q=rng.normal(size=(2, 3, d)), h=rng.normal(size=(2, 5, d)),
                   wq=rng.normal(size=(d, d)), wk=rng.normal(size=(d, d)),
                   wv=rng.normal(size=(d, d)), wo=rng.normal(size=(d, d)))

    def fn():
        out = ad.mha(s["q"], s["h"], s["h"], s["wq"], s["wk"], s["wv"],
                     s["wo"], n_heads=2)
        return ad.mean(ad.mul(out, out))

    assert ad.grad_check(fn, s) < 1e-5


def test_grad_check_batch_norm_training_mode():
    rng = make_rng(6)
    s = store_with(x=rng.normal(size=(4, 3, 5)), gamma=np.ones(5),
                   beta=np.zeros(5))
    s.add_buffer("bn.mean", np.zeros(5))
    s.add_buffer("bn.var", np.ones(5))

    def fn():
        y = ad.batch_norm(s["x"], s["gamma"], s["beta"], s.buffers, "bn",
                          training=True, update_running=False)
        return ad.mean(ad.mul(y, y))

    assert ad.grad_check(fn, s) < 1e-5


# --- masked softmax exactness -----------------------------------------------------

def test_masked_softmax_exact_zeros_and_normalization():
    logits = ad.Tensor(np.array([[2.0, -1.0, 0.5, 3.0]]))
    mask = np.array([[True, False, True, False]])
    p = ad.masked_softmax(logits, mask).data
    assert p[0, 1] == 0.0 and p[0, 3] == 0.0
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    lp = ad.masked_log_softmax(logits, mask).data
    assert np.exp(lp[0, 1]) == 0.0   # NEG_INF underflows to exactly zero
    assert np.allclose(np.exp(lp[0, mask[0]]), p[0, mask[0]], rtol=1e-15)


def test_masked_softmax_all_masked_row_rejected():
    logits = ad.Tensor(np.zeros((1, 3)))
    with pytest.raises(ContractViolation):
        ad.masked_softmax(logits, np.zeros((1, 3), dtype=bool))


# --- batch norm running statistics ---------------------------------------------------

def test_batch_norm_running_stats_update_and_eval():
    rng = make_rng(7)
    x = rng.normal(loc=3.0, scale=2.0, size=(64, 4))
    s = store_with(gamma=np.ones(4), beta=np.zeros(4))
    s.add_buffer("bn.mean", np.zeros(4))
    s.add_buffer("bn.var", np.ones(4))
    for _ in range(200):
        ad.batch_norm(ad.Tensor(x), s["gamma"], s["beta"], s.buffers, "bn",
                      training=True)
    assert np.allclose(s.buffers["bn.mean"], x.mean(axis=0), atol=1e-6)
    # Evaluation mode uses the running stats and leaves them untouched.
    snap = s.buffers["bn.mean"].copy()
    y = ad.batch_norm(ad.Tensor(x), s["gamma"], s["beta"], s.buffers, "bn",
                      training=False)
    assert np.array_equal(s.buffers["bn.mean"], snap)
    assert abs(y.data.mean()) < 0.1


def test_batch_norm_update_running_flag():
    s = store_with(gamma=np.ones(2), beta=np.zeros(2))
    s.add_buffer("bn.mean", np.zeros(2))
    s.add_buffer("bn.var", np.ones(2))
    x = ad.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    ad.batch_norm(x, s["gamma"], s["beta"], s.buffers, "bn", training=True,
                  update_running=False)
    assert np.array_equal(s.buffers["bn.mean"], np.zeros(2))


# --- broadcasting in backward ---------------------------------------------------------

def test_unbroadcast_gradients():
    s = store_with(b=np.array([1.0, 2.0, 3.0]))

    def fn():
        x = ad.Tensor(np.ones((4, 3)))
        return ad.tensor_sum(x + s["b"])

    s.zero_grad()
    out = fn()
    out.backward()
    assert np.array_equal(s["b"].grad, np.full(3, 4.0))
    assert ad.grad_check(fn, s) < 1e-8


# --- param store and checkpoints ---------------------------------------------------

def test_param_store_copy_is_deep():
    s = store_with(w=np.ones((2, 2)))
    s.add_buffer("buf", np.zeros(3))
    c = s.copy()
    c["w"].data[0, 0] = 5.0
    c.buffers["buf"][0] = 7.0
    assert s["w"].data[0, 0] == 1.0
    assert s.buffers["buf"][0] == 0.0


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = make_rng(8)
    s = store_with(w=rng.normal(size=(3, 3)), b=rng.normal(size=3))
    s.add_buffer("bn.mean", rng.normal(size=3))
    cfg = {"d_model": 3, "n_layers": 1}
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, s, cfg, meta={"note": 1})
    s2, cfg2, meta = ad.load_checkpoint(path)
    assert cfg2 == cfg and meta == {"note": 1}
    for name in s.params:
        assert np.array_equal(s[name].data, s2[name].data)
    assert np.array_equal(s.buffers["bn.mean"], s2.buffers["bn.mean"])


def test_checkpoint_rejects_tampered_header(tmp_path):
    s = store_with(w=np.ones((2, 2)))
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, s, {"d_model": 2})
    blob = path.read_bytes()
    patched = blob.replace(b'"d_model": 2', b'"d_model": 3')
    assert patched != blob
    path.write_bytes(patched)
    with pytest.raises(ContractViolation):
        ad.load_checkpoint(path)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ContractViolation):
        ad.load_checkpoint(path)


def test_xavier_uniform_bounds():
    rng = make_rng(9)
    w = ad.xavier_uniform(rng, 10, 20)
    limit = np.sqrt(6.0 / 30.0)
    assert w.shape == (10, 20)
    assert np.abs(w).max() <= limit
