import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from atlab import attacks, data, models, objectives
from helpers import tiny_model

DT = torch.float64


def _batch(n=6, d=5, C=3, seed=1):
    ds = data.make_synthetic(C, max(n // C, 1) + 1, d, 0.6, seed=seed)
    ds = data.subset(ds, n)
    return data.full_batch(ds)


def test_spec_validation():
    with pytest.raises(attacks.AttackError):
        attacks.PerturbationSpec(epsilon=0.0)
    with pytest.raises(attacks.AttackError):
        attacks.PerturbationSpec(step_size=-1.0)
    with pytest.raises(attacks.AttackError):
        attacks.PerturbationSpec(steps=-1)
    with pytest.raises(attacks.AttackError):
        attacks.PerturbationSpec(norm="l1")
    with pytest.raises(attacks.AttackError):
        attacks.PerturbationSpec(loss_kind="mse")


def test_project_identity_on_clean():
    batch = _batch()
    for norm in ("linf", "l2"):
        spec = attacks.PerturbationSpec(norm=norm, epsilon=0.1, step_size=0.01)
        out = attacks.project(batch.inputs.clone(), batch.inputs, spec)
        assert torch.equal(out, batch.inputs)


def test_project_linf_clamp():
    x = torch.full((1, 4), 0.5, dtype=DT)
    spec = attacks.PerturbationSpec(norm="linf", epsilon=0.1, step_size=0.01)
    out = attacks.project(x + 0.2, x, spec)
    assert torch.allclose(out, x + 0.1, atol=1e-12)


def test_project_l2_radial():
    x = torch.full((1, 4), 0.5, dtype=DT)
    delta = torch.tensor([[0.1, -0.1, 0.1, -0.1]], dtype=DT)  # norm 0.2
    spec = attacks.PerturbationSpec(norm="l2", epsilon=0.1, step_size=0.01)
    out = attacks.project(x + delta, x, spec)
    moved = out - x
    assert moved.norm().item() == pytest.approx(0.1, abs=1e-12)
    # direction preserved
    cos = (moved * delta).sum() / (moved.norm() * delta.norm())
    assert cos.item() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 1000), eps=st.floats(0.01, 0.5),
       norm=st.sampled_from(["linf", "l2"]))
def test_project_feasibility_property(seed, eps, norm):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand((3, 6), generator=g, dtype=DT)
    x_adv = x + torch.randn((3, 6), generator=g, dtype=DT)
    spec = attacks.PerturbationSpec(norm=norm, epsilon=eps, step_size=0.01)
    out = attacks.project(x_adv, x, spec)
    delta = out - x
    if norm == "linf":
        assert delta.abs().max().item() <= eps + 1e-9
    else:
        assert delta.norm(dim=1).max().item() <= eps + 1e-9
    assert out.min().item() >= 0.0 and out.max().item() <= 1.0


def test_pgd_zero_steps_no_start_identity():
    batch = _batch()
    params = tiny_model("linear", 3, (5,))
    spec = attacks.PerturbationSpec(epsilon=0.1, step_size=0.02, steps=0, random_start=False)
    out = attacks.pgd_attack(params, batch, spec)
    assert torch.equal(out, batch.inputs)


def test_fgsm_equals_pgd1_bitwise():
    batch = _batch(n=12)
    for family, widths in (("linear", ()), ("mlp", (7,))):
        params = tiny_model(family, 3, (5,), widths=widths, init_seed=3)
        spec = attacks.PerturbationSpec(epsilon=0.07, step_size=0.07, steps=1,
                                        random_start=False)
        assert torch.equal(attacks.fgsm(params, batch, spec),
                           attacks.pgd_attack(params, batch, spec))


def test_fgsm_zero_model_fixed_point():
    batch = _batch()
    params = tiny_model("linear", 3, (5,))
    zeroed = models.unflatten_like(params, torch.zeros(models.param_count(params), dtype=DT))
    spec = attacks.PerturbationSpec(epsilon=0.1, step_size=0.1, steps=1, random_start=False)
    assert torch.equal(attacks.fgsm(zeroed, batch, spec), batch.inputs)


def test_fgsm_budget():
    batch = _batch()
    params = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=1)
    spec = attacks.PerturbationSpec(epsilon=0.03, step_size=0.03, steps=1)
    out = attacks.fgsm(params, batch, spec)
    assert (out - batch.inputs).abs().max().item() <= 0.03 + 1e-12


def test_pgd_deterministic_in_seed():
    batch = _batch()
    params = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=2)
    spec = attacks.PerturbationSpec(epsilon=0.1, step_size=0.02, steps=5,
                                    random_start=True, seed=11)
    a = attacks.pgd_attack(params, batch, spec)
    b = attacks.pgd_attack(params, batch, spec)
    assert torch.equal(a, b)
    c = attacks.pgd_attack(params, batch,
                           attacks.PerturbationSpec(epsilon=0.1, step_size=0.02, steps=5,
                                                    random_start=True, seed=12))
    assert not torch.equal(a, c)


def test_pgd_iterates_feasible_every_step():
    batch = _batch(n=4)
    for norm in ("linf", "l2"):
        params = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=4)
        spec = attacks.PerturbationSpec(norm=norm, epsilon=0.08, step_size=0.03, steps=6,
                                        random_start=True, seed=3)
        seen = []

        def hook(step, x_adv):
            delta = x_adv - batch.inputs
            if norm == "linf":
                dist = delta.abs().max().item()
            else:
                dist = delta.reshape(delta.shape[0], -1).norm(dim=1).max().item()
            seen.append((dist, x_adv.min().item(), x_adv.max().item()))

        attacks.pgd_attack(params, batch, spec, iterate_hook=hook)
        assert len(seen) == 7
        for dist, lo, hi in seen:
            assert dist <= spec.epsilon + 1e-9
            assert lo >= -1e-12 and hi <= 1.0 + 1e-12


def test_pgd_improves_loss_on_average():
    # monotone improvement in expectation over random instances, ce and cw kinds
    total = {"ce": [0.0, 0.0], "cw": [0.0, 0.0]}
    for trial in range(100):
        batch = _batch(n=3, seed=trial)
        params = tiny_model("linear", 3, (5,), init_seed=trial)
        for kind in ("ce", "cw"):
            spec = attacks.PerturbationSpec(epsilon=0.1, step_size=0.025, steps=8,
                                            random_start=True, loss_kind=kind, seed=trial)
            adv = attacks.pgd_attack(params, batch, spec)
            clean_loss = objectives.attack_loss_values(kind, params, batch.inputs,
                                                       batch.labels).mean().item()
            adv_loss = objectives.attack_loss_values(kind, params, adv,
                                                     batch.labels).mean().item()
            total[kind][0] += clean_loss
            total[kind][1] += adv_loss
    for kind in ("ce", "cw"):
        assert total[kind][1] >= total[kind][0]


def test_kl_attack_requires_clean_probs():
    batch = _batch()
    params = tiny_model("linear", 3, (5,))
    spec = attacks.PerturbationSpec(epsilon=0.1, step_size=0.02, steps=3,
                                    loss_kind="kl_vs_clean")
    with pytest.raises(attacks.AttackError):
        attacks.pgd_attack(params, batch, spec)


def test_kl_attack_increases_divergence():
    batch = _batch(n=8)
    params = tiny_model("mlp", 3, (5,), widths=(8,), init_seed=5)
    clean_probs = models.forward_probs(params, batch.inputs)
    spec = attacks.PerturbationSpec(epsilon=0.15, step_size=0.03, steps=10,
                                    loss_kind="kl_vs_clean", random_start=False)
    adv = attacks.pgd_attack(params, batch, spec, clean_probs=clean_probs)
    adv_probs = models.forward_probs(params, adv)
    assert objectives.kl_divergence(clean_probs, adv_probs).item() > 0.0


def test_vertex_oracle_small_epsilon_is_clean_loss():
    batch = _batch(n=5)
    params = tiny_model("linear", 3, (5,), init_seed=6)
    spec = attacks.PerturbationSpec(epsilon=1e-12, step_size=1e-12, steps=1)
    oracle, argmax = attacks.vertex_oracle(params, batch, spec)
    clean = objectives.attack_loss_values("ce", params, batch.inputs, batch.labels)
    assert (oracle - clean).abs().max().item() < 1e-9
    assert (argmax - batch.inputs).abs().max().item() < 1e-9


def test_vertex_oracle_d1_matches_endpoints():
    params = tiny_model("linear", 2, (1,), init_seed=1)
    x = torch.tensor([[0.5]], dtype=DT)
    batch = data.ExampleBatch(inputs=x, labels=torch.tensor([0]),
                              sample_ids=torch.tensor([0]))
    spec = attacks.PerturbationSpec(epsilon=0.2, step_size=0.1, steps=1)
    oracle, _ = attacks.vertex_oracle(params, batch, spec)
    lo = objectives.attack_loss_values("ce", params, x - 0.2, batch.labels)
    hi = objectives.attack_loss_values("ce", params, x + 0.2, batch.labels)
    assert oracle.item() == pytest.approx(max(lo.item(), hi.item()), abs=1e-12)


def test_vertex_oracle_dominates_pgd():
    for trial in range(50):
        batch = _batch(n=2, d=6, seed=trial + 100)
        params = tiny_model("linear", 3, (6,), init_seed=trial)
        spec = attacks.PerturbationSpec(epsilon=0.1, step_size=0.0125, steps=20,
                                        random_start=True, seed=trial)
        oracle, _ = attacks.vertex_oracle(params, batch, spec)
        adv = attacks.pgd_attack(params, batch, spec)
        achieved = objectives.attack_loss_values("ce", params, adv, batch.labels)
        assert bool((achieved <= oracle + 1e-9).all())


def test_vertex_oracle_rejects_nonlinear_and_large_d():
    batch = _batch()
    mlp = tiny_model("mlp", 3, (5,), widths=(4,))
    spec = attacks.PerturbationSpec(epsilon=0.1, step_size=0.01, steps=1)
    with pytest.raises(attacks.AttackError):
        attacks.vertex_oracle(mlp, batch, spec)
    big = tiny_model("linear", 3, (13,))
    ds = data.make_synthetic(3, 2, 13, 0.5, seed=0)
    with pytest.raises(attacks.AttackError):
        attacks.vertex_oracle(big, data.full_batch(ds), spec)
