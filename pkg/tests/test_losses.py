import math

import numpy as np
import pytest
from conftest import TINY, StubModel, identity_stub
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cslpae.losses import (
    COMPONENTS,
    VARIANTS,
    LatentSpace,
    LossConfig,
    clip_loss,
    cosine_similarity,
    cross_entropy_head,
    latent_permutation_loss,
    nt_xent,
    quadruplet_permutation_loss,
    reconstruction_loss,
    softmax_cross_entropy,
    total_loss,
)
from cslpae.model import build_model
from cslpae.tensor import Tensor, gradcheck

ORTHO = np.array([[1.0, 0.0], [0.0, 1.0]])


def brute_nt_xent(Za, Zb, k, tau, include_positive=False):
    """Loop oracle: plain python sums over the similarity definition."""
    def sim(u, v):
        return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))

    num = math.exp(sim(Za[k], Zb[k]) / tau)
    den = sum(math.exp(sim(Za[k], Zb[i]) / tau) for i in range(len(Zb)) if include_positive or i != k)
    return -math.log(num / den)


def latent_matrix(K_min=2, K_max=6, d=3):
    row = arrays(np.float64, (d,), elements=st.floats(-3, 3, allow_nan=False))
    return st.integers(K_min, K_max).flatmap(
        lambda K: st.tuples(*[row.filter(lambda v: np.linalg.norm(v) > 1e-2)] * K).map(np.stack)
    )


# reconstruction and cosine


def test_reconstruction_values():
    assert reconstruction_loss(np.ones(4), np.ones(4)).item() == 0.0
    assert reconstruction_loss(np.ones((2, 3)), np.zeros((2, 3))).item() == 1.0
    assert reconstruction_loss(np.array([1.0, 2.0]), np.array([2.0, 4.0])).item() == 2.5


def test_reconstruction_shape_mismatch():
    with pytest.raises(ValueError):
        reconstruction_loss(np.ones(3), np.ones(4))


def test_cosine_values():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_cosine_zero_norm_warns(caplog):
    assert cosine_similarity([0, 0], [1, 0]) == 0.0
    assert "zero-norm" in caplog.text


def test_contrastive_zero_norm_is_finite(caplog):
    Z = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert np.isfinite(clip_loss(Z, ORTHO, 1.0).item())
    assert "zero-norm" in caplog.text


# NT-Xent and CLIP


def test_nt_xent_orthonormal():
    assert nt_xent(ORTHO, ORTHO, 1, 1.0).item() == pytest.approx(-1.0, abs=1e-12)


def test_nt_xent_identical_vectors():
    Z = np.ones((2, 2))
    assert nt_xent(Z, Z, 0, 1.0).item() == pytest.approx(0.0, abs=1e-12)


def test_nt_xent_requires_two_pairs():
    with pytest.raises(ValueError):
        nt_xent(np.ones((1, 2)), np.ones((1, 2)), 0, 1.0)


def test_nt_xent_rejects_bad_temperature():
    with pytest.raises(ValueError):
        nt_xent(ORTHO, ORTHO, 0, 0.0)


def test_nt_xent_positive_in_denominator_flag():
    # standard form: -log(e / (e + 1))
    got = nt_xent(ORTHO, ORTHO, 0, 1.0, include_positive=True).item()
    assert got == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(latent_matrix(), st.floats(0.05, 5.0), st.booleans(), st.data())
def test_nt_xent_matches_loop_oracle(Za, tau, include_positive, data):
    Zb = Za[::-1] + 0.5
    k = data.draw(st.integers(0, len(Za) - 1))
    got = nt_xent(Za, Zb, k, tau, include_positive).item()
    assert got == pytest.approx(brute_nt_xent(Za, Zb, k, tau, include_positive), rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(latent_matrix(), st.floats(0.1, 2.0))
def test_nt_xent_temperature_doubling(Za, tau):
    Zb = np.roll(Za, 1, axis=0) + 0.1
    got = nt_xent(Za, Zb, 0, 2 * tau).item()
    assert got == pytest.approx(brute_nt_xent(Za, Zb, 0, 2 * tau), rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(latent_matrix(), st.data())
def test_nt_xent_scale_invariant(Za, data):
    K = len(Za)
    scales = np.array(data.draw(st.lists(st.floats(0.01, 100.0), min_size=2 * K, max_size=2 * K)))
    Zb = Za[::-1].copy()
    base = nt_xent(Za, Zb, 0, 0.3).item()
    scaled = nt_xent(Za * scales[:K, None], Zb * scales[K:, None], 0, 0.3).item()
    assert scaled == pytest.approx(base, abs=1e-6)


def test_clip_orthonormal():
    assert clip_loss(ORTHO, ORTHO, 1.0).item() == pytest.approx(-2.0, abs=1e-12)


def test_clip_collapsed():
    Z = np.full((2, 3), 0.7)
    assert clip_loss(Z, Z, 1.0).item() == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(latent_matrix(), st.floats(0.05, 2.0), st.booleans())
def test_clip_symmetric_exactly(Za, tau, include_positive):
    Zb = np.sin(Za * 3.0) + 0.2
    assert clip_loss(Za, Zb, tau, include_positive).item() == clip_loss(Zb, Za, tau, include_positive).item()


@settings(max_examples=40, deadline=None)
@given(latent_matrix(), st.floats(0.05, 2.0))
def test_clip_matches_loop_oracle(Za, tau):
    Zb = np.cos(Za) + 0.3
    K = len(Za)
    want = sum(brute_nt_xent(Za, Zb, k, tau) + brute_nt_xent(Zb, Za, k, tau) for k in range(K)) / K
    assert clip_loss(Za, Zb, tau).item() == pytest.approx(want, rel=1e-9, abs=1e-9)


# latent permutation


def test_lp_identity_stub_identical_pairs():
    X = np.array([[[1.0, 0.0]]])
    for sel in ("subject", "task"):
        assert latent_permutation_loss(identity_stub(), sel, X, X).item() == 0.0


def test_lp_identical_members_is_twice_recon(tiny_model64):
    X = np.random.default_rng(0).standard_normal((3, 2, 32))
    recon = reconstruction_loss(X, tiny_model64.reconstruct(X)).item()
    for sel in LatentSpace:
        lp = latent_permutation_loss(tiny_model64, sel, X, X).item()
        assert lp == pytest.approx(2 * recon, rel=1e-12)


def _task_constant_stub():
    # subject split carries the signal, task split is a fixed code
    return StubModel(
        lambda X: (X * 1.0, X * 0.0 + 0.25),
        lambda zs, zt: zs * 0.9 + zt,
    )


def test_lp_task_equals_unpermuted_when_task_latent_constant():
    rng = np.random.default_rng(1)
    Xa, Xb = rng.standard_normal((4, 1, 5)), rng.standard_normal((4, 1, 5))
    model = _task_constant_stub()
    lp = latent_permutation_loss(model, "task", Xa, Xb).item()
    plain = sum(((model.decode(model.encode(X)).data - X) ** 2).mean(axis=(1, 2)).sum() for X in (Xa, Xb)) / 4
    assert lp == plain


def test_lp_rejects_mismatched_classes():
    X = np.zeros((2, 1, 2))
    with pytest.raises(ValueError):
        latent_permutation_loss(identity_stub(), "task", X, X, labels_a=[0, 1], labels_b=[0, 0])


def test_lp_swaps_the_requested_split():
    # decoder returns the task latent: task-swap reconstructs a from b's signal
    model = StubModel(lambda X: (X * 0.0, X * 1.0), lambda zs, zt: zt + zs)
    Xa, Xb = np.zeros((1, 1, 2)), np.ones((1, 1, 2))
    assert latent_permutation_loss(model, "task", Xa, Xb).item() == 2.0
    assert latent_permutation_loss(model, "subject", Xa, Xb).item() == 0.0


# quadruplet permutation


def _qp(model, quad):
    return quadruplet_permutation_loss(model, *quad).item()


def test_qp_all_identical_is_recon(tiny_model64):
    X = np.random.default_rng(2).standard_normal((3, 2, 32))
    recon = reconstruction_loss(X, tiny_model64.reconstruct(X)).item()
    assert _qp(tiny_model64, (X, X, X, X)) == pytest.approx(recon, rel=1e-12)


def test_qp_collapse_to_same_task_lp(tiny_model64):
    # (a, b, a, b): a and b share the task, so only task latents move between them
    rng = np.random.default_rng(3)
    Xa, Xb = rng.standard_normal((3, 2, 32)), rng.standard_normal((3, 2, 32))
    lp = latent_permutation_loss(tiny_model64, "task", Xa, Xb).item()
    assert _qp(tiny_model64, (Xa, Xb, Xa, Xb)) == pytest.approx(0.5 * lp, rel=1e-12)


def test_qp_collapse_to_same_subject_lp(tiny_model64):
    # (a, a, c, c): a and c share the subject
    rng = np.random.default_rng(4)
    Xa, Xc = rng.standard_normal((3, 2, 32)), rng.standard_normal((3, 2, 32))
    lp = latent_permutation_loss(tiny_model64, "subject", Xa, Xc).item()
    assert _qp(tiny_model64, (Xa, Xa, Xc, Xc)) == pytest.approx(0.5 * lp, rel=1e-12)


def test_qp_collapse_exact_on_stub():
    model = StubModel(lambda X: (X * 2.0, X - 1.0), lambda zs, zt: zs * 0.5 + zt * zt)
    rng = np.random.default_rng(5)
    Xa, Xb = rng.standard_normal((2, 1, 4)), rng.standard_normal((2, 1, 4))
    assert _qp(model, (Xa, Xb, Xa, Xb)) == 0.5 * latent_permutation_loss(model, "task", Xa, Xb).item()
    assert _qp(model, (Xa, Xa, Xb, Xb)) == 0.5 * latent_permutation_loss(model, "subject", Xa, Xb).item()


def test_qp_latent_routing():
    # decoder output = subject latent * 10 + task latent, latents = the raw signal
    model = StubModel(lambda X: (X * 1.0, X * 1.0), lambda zs, zt: zs * 10.0 + zt)
    a, b, c, d = (np.full((1, 1, 1), v) for v in (1.0, 2.0, 3.0, 4.0))
    # a <- (S_c, T_b) = 32, b <- (S_d, T_a) = 41, c <- (S_a, T_d) = 14, d <- (S_b, T_c) = 23
    want = ((32 - 1) ** 2 + (41 - 2) ** 2 + (14 - 3) ** 2 + (23 - 4) ** 2) / 4
    assert _qp(model, (a, b, c, d)) == want


def test_qp_shape_mismatch():
    with pytest.raises(ValueError):
        quadruplet_permutation_loss(identity_stub(), np.zeros((1, 1, 2)), np.zeros((1, 1, 2)),
                                    np.zeros((1, 1, 3)), np.zeros((1, 1, 2)))


# supervised heads


def test_ce_uniform_logits():
    for C in (2, 3, 7):
        W, b = Tensor(np.zeros((4, C))), Tensor(np.zeros(C))
        assert cross_entropy_head(np.ones(4), 1, W, b).item() == pytest.approx(math.log(C), abs=1e-12)


def test_ce_saturation():
    W, b = Tensor(np.zeros((1, 2))), Tensor(np.array([20.0, 0.0]))
    assert cross_entropy_head(np.ones(1), 0, W, b).item() < 1e-8


def test_ce_hand_value():
    W, b = Tensor(np.zeros((1, 2))), Tensor(np.array([1.0, 0.0]))
    assert cross_entropy_head(np.ones(1), 0, W, b).item() == pytest.approx(0.31326, abs=1e-5)
    assert softmax_cross_entropy([1.0, 0.0], 0) == pytest.approx(0.31326, abs=1e-5)


def test_ce_label_out_of_range():
    W, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        cross_entropy_head(np.ones(2), 3, W, b)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), st.lists(st.integers(0, 2), min_size=3, max_size=3))
def test_ce_batch_matches_reference(z, labels):
    rng = np.random.default_rng(0)
    W, b = rng.standard_normal((4, 3)), rng.standard_normal(3)
    logits = z @ W + b
    want = np.mean([softmax_cross_entropy(logits[i], labels[i]) for i in range(3)])
    got = cross_entropy_head(z, labels, Tensor(W), Tensor(b)).item()
    assert got == pytest.approx(want, rel=1e-10, abs=1e-12)


# configuration and totals


def test_variant_table():
    assert VARIANTS["CSLP-AE"] == {"lp_subject", "lp_task", "clip_subject", "clip_task"}
    assert VARIANTS["AE"] == {"recon"}
    assert VARIANTS["CE(t)"] == {"ce_task"}
    assert VARIANTS["CSQLP-AE"] == {"qp", "lp_subject", "lp_task", "clip_subject", "clip_task"}
    assert len(VARIANTS) == 11
    assert all(v <= set(COMPONENTS) for v in VARIANTS.values())


def test_loss_config_validation():
    assert LossConfig().temperature == 0.1
    assert not LossConfig().denominator_includes_positive
    assert not LossConfig(variant="CL").uses_decoder
    assert LossConfig(variant="SQP-AE").uses_decoder
    with pytest.raises(ValueError):
        LossConfig(variant="VAE")
    with pytest.raises(ValueError):
        LossConfig(temperature=-1.0)
    with pytest.raises(ValueError):
        LossConfig(components={"recon", "bogus"})


def test_latent_space_parsing():
    assert LatentSpace("s") is LatentSpace.SUBJECT
    assert LatentSpace("Task") is LatentSpace.TASK
    assert len(LatentSpace) == 2
    with pytest.raises(ValueError):
        LatentSpace("both")


def test_total_loss_sum():
    cfg = LossConfig("CSLP-AE")
    parts = {"lp_subject": 1.0, "lp_task": 2.0, "clip_subject": 3.0, "clip_task": 4.0}
    assert total_loss(cfg, {k: Tensor(v) for k, v in parts.items()}).item() == 10.0


def test_total_loss_single_component():
    assert total_loss(LossConfig("AE"), {"recon": Tensor(0.75)}).item() == 0.75


def test_total_loss_missing_and_extra():
    with pytest.raises(KeyError):
        total_loss(LossConfig("AE"), {})
    with pytest.raises(KeyError):
        total_loss(LossConfig("AE"), {"recon": Tensor(1.0), "qp": Tensor(1.0)})


# gradients of the composites


def _grad_setup():
    model = build_model(TINY, seed=1, dtype=np.float64)
    model.params["dec.out.weight"].data *= 100.0
    names = list(model.params)
    rng = np.random.default_rng(6)
    return model, names, [rng.standard_normal((2, 2, 32)) for _ in range(4)]


def _check(model, names, fn):
    def wrapped(*weights):
        model.params = dict(zip(names, weights))
        return fn()

    return gradcheck(wrapped, [model.params[n] for n in names])


@pytest.mark.parametrize("selector", ["subject", "task"])
def test_gradcheck_lp(selector):
    model, names, (Xa, Xb, _, _) = _grad_setup()
    assert _check(model, names, lambda: latent_permutation_loss(model, selector, Xa, Xb)) < 1e-3


def test_gradcheck_qp():
    model, names, Xs = _grad_setup()
    assert _check(model, names, lambda: quadruplet_permutation_loss(model, *Xs)) < 1e-3


@pytest.mark.parametrize("include_positive", [False, True])
def test_gradcheck_clip(include_positive):
    model, names, (Xa, Xb, _, _) = _grad_setup()
    enc_names = [n for n in names if n.startswith("enc")]

    def fn():
        za, zb = model.encode(Xa).pooled(), model.encode(Xb).pooled()
        return clip_loss(za[0], zb[0], 0.5, include_positive) + clip_loss(za[1], zb[1], 0.5, include_positive)

    params = [model.params[n] for n in enc_names]

    def wrapped(*weights):
        model.params.update(zip(enc_names, weights))
        return fn()

    assert gradcheck(wrapped, params) < 1e-3


def test_gradcheck_ce_head():
    rng = np.random.default_rng(7)
    z, W, b = (Tensor(rng.standard_normal(s)) for s in ((4, 3), (3, 5), (5,)))
    assert gradcheck(lambda z, W, b: cross_entropy_head(z, [0, 4, 2, 2], W, b), [z, W, b]) < 1e-3
