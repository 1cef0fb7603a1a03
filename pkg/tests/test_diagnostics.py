import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from atlab import attacks, data, diagnostics, models, objectives
from helpers import brute_force_kendall, tiny_model

DT = torch.float64


def _batch(n=6, d=5, C=3, seed=1, sigma=0.1):
    ds = data.make_synthetic(C, max(n // C, 1) + 1, d, 0.6, seed=seed, sigma=sigma)
    return data.full_batch(data.subset(ds, n))


def _spec(eps=0.05, steps=5, rs=False, norm="linf", seed=0):
    return attacks.PerturbationSpec(norm=norm, epsilon=eps, step_size=eps / 2,
                                    steps=steps, random_start=rs, seed=seed)


# ---------------------------------------------------------------------------
# gradient magnitude

def test_grad_norms_epsilon_to_zero_residual_vanishes():
    batch = _batch()
    params = tiny_model("mlp", 3, (5,), widths=(8,), init_seed=2)
    out = diagnostics.grad_norm_terms(params, batch, "pgd_at", _spec(eps=1e-9))
    assert out["norm_residual"] <= 1e-3 * out["norm_clean_ce"]
    ratio = diagnostics.grad_ratio(params, batch, "pgd_at", _spec(eps=1e-9))
    assert ratio <= 1e-3


def test_grad_norms_trades_beta_zero():
    batch = _batch()
    params = tiny_model("mlp", 3, (5,), widths=(8,), init_seed=2)
    out = diagnostics.grad_norm_terms(params, batch, "trades", _spec(), beta=0.0)
    assert out["norm_kl"] == 0.0
    assert diagnostics.grad_ratio(params, batch, "trades", _spec(), beta=0.0) == 0.0


def test_grad_norms_finite_nonnegative():
    batch = _batch()
    params = tiny_model("convnet", 3, (4, 4, 3), widths=(4, 4), init_seed=1)
    ds = data.make_synthetic(3, 4, 48, 0.6, seed=3, image_shape=(4, 4, 3))
    batch = data.full_batch(ds)
    for method in ("pgd_at", "trades"):
        out = diagnostics.grad_norm_terms(params, batch, method, _spec(eps=0.03, steps=3))
        for key in ("norm_clean_ce", "norm_adv", "norm_kl", "norm_residual"):
            if out[key] is not None:
                assert math.isfinite(out[key]) and out[key] >= 0.0


def test_grad_ratio_scale_invariant():
    # the ratio is a quotient of gradient norms of batch-mean losses, so
    # replicating every sample (scaling the batch loss) leaves it unchanged
    batch = _batch(n=4)
    big = data.ExampleBatch(inputs=batch.inputs.repeat(3, 1),
                            labels=batch.labels.repeat(3),
                            sample_ids=torch.arange(12))
    params = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=4)
    r1 = diagnostics.grad_ratio(params, batch, "pgd_at", _spec())
    r2 = diagnostics.grad_ratio(params, big, "pgd_at", _spec())
    assert r1 == pytest.approx(r2, rel=1e-9)


def test_grad_ratio_vanishing_denominator_nan():
    batch = _batch()
    params = tiny_model("linear", 3, (5,))
    zeroed = models.unflatten_like(params, torch.zeros(models.param_count(params), dtype=DT))
    # uniform predictions on a balanced batch: clean CE gradient can vanish
    bal = data.ExampleBatch(inputs=torch.full((3, 5), 0.5, dtype=DT),
                            labels=torch.tensor([0, 1, 2]), sample_ids=torch.arange(3))
    ratio = diagnostics.grad_ratio(zeroed, bal, "pgd_at", _spec(eps=1e-9, steps=1))
    assert math.isnan(ratio)


# ---------------------------------------------------------------------------
# direction sweep

def test_sweep_lambda_zero_exact():
    batch = _batch()
    params = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=3)
    sweep = diagnostics.make_sweep(params, (-0.02, 0.0, 0.02), seed=1)
    records = diagnostics.direction_sweep(params, batch, sweep,
                                          diagnostics.SWEEP_LOSS_KINDS, _spec())
    for rec in records.values():
        i = rec.lambdas.index(0.0)
        assert rec.l2_dist[i] == 0.0
        assert rec.cosine[i] == pytest.approx(1.0, abs=1e-12)


def test_sweep_direction_filter_normalized():
    params = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=3)
    sweep = diagnostics.make_sweep(params, (0.0,), seed=2)
    for g, d in zip(params.groups, sweep.direction):
        if g.array.norm().item() == 0.0:
            assert d.norm().item() == 0.0
        else:
            assert d.norm().item() == pytest.approx(g.array.norm().item(), rel=1e-12)


def test_sweep_zero_group_direction_stays_zero():
    params = tiny_model("linear", 3, (5,), init_seed=1)  # zero biases at init
    raw = [torch.randn_like(g.array) for g in params.groups]
    direction = diagnostics.normalize_direction(params, raw)
    assert direction[1].abs().max().item() == 0.0  # bias group


def test_sweep_clean_ce_distance_continuous_on_linear():
    batch = _batch(n=8)
    params = tiny_model("linear", 3, (5,), init_seed=5)
    coarse = [x / 100 for x in range(-5, 6)]
    sweep = diagnostics.make_sweep(params, tuple(coarse), seed=3)
    rec = diagnostics.direction_sweep(params, batch, sweep, ("clean_ce",), _spec())["clean_ce"]
    jumps = [abs(a - b) for a, b in zip(rec.l2_dist[1:], rec.l2_dist[:-1])]
    # smooth loss: successive distances move at a bounded rate on this grid
    span = max(rec.l2_dist) - min(rec.l2_dist)
    assert max(jumps) <= 0.5 * span + 1e-9


def test_epoch_gradient_cosine_trivials():
    v = torch.tensor([1.0, 2.0, -3.0], dtype=DT)
    assert diagnostics.epoch_gradient_cosine(v, v) == pytest.approx(1.0, abs=1e-12)
    assert diagnostics.epoch_gradient_cosine(v, -v) == pytest.approx(-1.0, abs=1e-12)
    a = torch.tensor([1.0, 0.0], dtype=DT)
    b = torch.tensor([0.0, 1.0], dtype=DT)
    assert diagnostics.epoch_gradient_cosine(a, b) == 0.0
    assert math.isnan(diagnostics.epoch_gradient_cosine(a, torch.zeros(2, dtype=DT)))
    with pytest.raises(diagnostics.DiagnosticsError):
        diagnostics.epoch_gradient_cosine(a, torch.zeros(3, dtype=DT))


# ---------------------------------------------------------------------------
# Lipschitz estimation

def test_lipschitz_zero_weight_closed_form():
    # W = 0: grad_W CE = (p - onehot) x^T with p uniform, so the ratio under l2
    # equals ||p - onehot|| exactly for every pair
    C, d = 3, 4
    params = tiny_model("linear", C, (d,))
    zeroed = models.unflatten_like(params, torch.zeros(models.param_count(params), dtype=DT))
    batch = _batch(n=5, d=d, C=C, seed=2)
    est = diagnostics.estimate_lipschitz(zeroed, batch, _spec(eps=0.1, norm="l2"),
                                         sample_count=6, seed=1)
    p = torch.full((C,), 1.0 / C, dtype=DT)
    onehot = torch.zeros(C, dtype=DT)
    onehot[0] = 1.0
    expect = (p - onehot).norm().item()  # same norm for every label
    assert est.k_hat == pytest.approx(expect, rel=1e-9)


def test_lipschitz_nested_seeds_monotone():
    batch = _batch()
    params = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=1)
    small = diagnostics.estimate_lipschitz(params, batch, _spec(eps=0.08), 3, seed=4)
    large = diagnostics.estimate_lipschitz(params, batch, _spec(eps=0.08), 6, seed=4)
    assert large.k_hat >= small.k_hat >= 0.0
    assert large.sample_count == 6


# ---------------------------------------------------------------------------
# stability-bound probe

def test_theorem1_identical_params_zero_violations():
    batch = _batch()
    params = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=2)
    report = diagnostics.theorem1_probe(params, params, batch, _spec(eps=0.05), k_hat=0.1)
    assert all(l == 0.0 for l in report.lhs)
    assert report.violation_rate == 0.0


def test_theorem1_epsilon_to_zero():
    batch = _batch()
    p1 = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=2)
    p2 = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=3)
    spec = _spec(eps=1e-9, steps=2)
    report = diagnostics.theorem1_probe(p1, p2, batch, spec, k_hat=0.0)
    for lhs, rhs in zip(report.lhs, report.rhs):
        assert lhs <= rhs + 1e-6


def _vertex_points(batch, eps):
    x = batch.inputs
    d = x.shape[1]
    lo, hi = (x - eps).clamp(0, 1), (x + eps).clamp(0, 1)
    points = []
    for k in range(2 ** d):
        mask = torch.tensor([(k >> j) & 1 for j in range(d)], dtype=torch.bool)
        points.append(torch.where(mask, hi, lo))
    return points


def test_theorem1_exact_linear_no_violations():
    # exact inner max (vertex oracle) + K over the full vertex grid -> no violations
    batch = _batch(n=4, d=4, seed=9)
    spec = _spec(eps=0.1, norm="linf")
    p1 = tiny_model("linear", 3, (4,), init_seed=11)
    p2 = tiny_model("linear", 3, (4,), init_seed=12)
    k_exact = diagnostics.lipschitz_over_points([p1, p2], batch,
                                                _vertex_points(batch, 0.1), "linf")
    report = diagnostics.theorem1_probe(p1, p2, batch, spec, k_exact, inner="vertex")
    assert report.violation_rate == 0.0


# ---------------------------------------------------------------------------
# per-sample adversarial loss

def test_per_sample_adv_loss_shape_and_degenerate():
    ds = data.make_synthetic(3, 6, 5, 0.6, seed=4)
    params = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=1)
    losses = diagnostics.per_sample_adv_loss(params, ds, _spec(eps=1e-9, steps=2))
    clean = objectives.attack_loss_values("ce", params, ds.inputs, ds.labels)
    assert losses.shape == (len(ds),)
    assert (losses - clean).abs().max().item() < 1e-6


def test_per_sample_adv_loss_dominates_clean():
    ds = data.make_synthetic(3, 10, 5, 0.6, seed=5)
    params = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=2)
    losses = diagnostics.per_sample_adv_loss(params, ds, _spec(eps=0.08, steps=10, rs=False))
    clean = objectives.attack_loss_values("ce", params, ds.inputs, ds.labels)
    assert bool((losses >= clean - 1e-9).all())


def test_per_sample_adv_loss_permutation_equivariant():
    ds = data.make_synthetic(3, 8, 5, 0.6, seed=6)
    params = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=3)
    spec = _spec(eps=0.05, steps=4, rs=False)
    base = diagnostics.per_sample_adv_loss(params, ds, spec, batch_size=5)
    perm = torch.randperm(len(ds), generator=torch.Generator().manual_seed(0))
    shuffled = data.Dataset(inputs=ds.inputs[perm], labels=ds.labels[perm],
                            class_count=ds.class_count)
    out = diagnostics.per_sample_adv_loss(params, shuffled, spec, batch_size=5)
    assert (out - base[perm]).abs().max().item() < 1e-12


# ---------------------------------------------------------------------------
# Kendall's tau

def test_kendall_trivials():
    assert diagnostics.kendall_tau([1, 2, 3], [1, 2, 3]) == 1.0
    assert diagnostics.kendall_tau([1, 2, 3], [3, 2, 1]) == -1.0
    assert math.isnan(diagnostics.kendall_tau([1, 1, 1], [1, 2, 3]))
    with pytest.raises(diagnostics.DiagnosticsError):
        diagnostics.kendall_tau([1, 2], [1, 2, 3])
    with pytest.raises(diagnostics.DiagnosticsError):
        diagnostics.kendall_tau([1], [2])


def test_kendall_matches_brute_force_exactly():
    g = torch.Generator().manual_seed(3)
    for n in (10, 57, 300):
        a = torch.randn(n, generator=g).tolist()
        b = torch.randn(n, generator=g).tolist()
        assert diagnostics.kendall_tau(a, b) == brute_force_kendall(a, b)


def test_kendall_matches_brute_force_with_ties():
    g = torch.Generator().manual_seed(4)
    for n in (20, 80):
        a = torch.randint(0, 5, (n,), generator=g).tolist()
        b = torch.randint(0, 5, (n,), generator=g).tolist()
        fast, brute = diagnostics.kendall_tau(a, b), brute_force_kendall(a, b)
        if math.isnan(brute):
            assert math.isnan(fast)
        else:
            assert fast == brute


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=2, max_size=60),
       st.data())
def test_kendall_property_fast_equals_brute(a, d):
    b = d.draw(st.lists(st.integers(-20, 20), min_size=len(a), max_size=len(a)))
    fast = diagnostics.kendall_tau(a, b)
    brute = brute_force_kendall(a, b)
    assert (math.isnan(fast) and math.isnan(brute)) or fast == brute


# ---------------------------------------------------------------------------
# CSV writers

def test_csv_writers(tmp_path):
    batch = _batch()
    params = tiny_model("mlp", 3, (5,), widths=(6,), init_seed=1)
    row = diagnostics.grad_norm_terms(params, batch, "pgd_at", _spec())
    row["epoch"] = 0
    diagnostics.write_grad_norms_csv([row], tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().startswith("epoch,method,norm_clean_ce")
    sweep = diagnostics.make_sweep(params, (0.0, 0.01), seed=1)
    recs = diagnostics.direction_sweep(params, batch, sweep, ("clean_ce",), _spec())
    diagnostics.write_sweep_csv(recs, tmp_path / "s.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 3
    report = diagnostics.theorem1_probe(params, params, batch, _spec(), k_hat=0.5)
    diagnostics.write_theorem1_csv(report, tmp_path / "t.csv")
    assert len((tmp_path / "t.csv").read_text().splitlines()) == len(batch) + 1
    diagnostics.write_tau(0.85, tmp_path / "tau.txt")
    assert (tmp_path / "tau.txt").read_text() == "0.85\n"
