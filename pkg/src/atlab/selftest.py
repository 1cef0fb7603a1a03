"""Fast oracle self-checks runnable from the CLI (`atlab selftest`).

Each check recomputes its expectation from an independent construction
(finite differences, brute-force enumeration, closed forms) and compares the
library path against it.
"""

import math
import torch

from . import attacks, complexity, data, diagnostics, models, objectives, trainer
from .rng import generator


def _fd_gradient(loss_fn, vec, h=1e-5):
    g = torch.zeros_like(vec)
    for i in range(vec.numel()):
        up, dn = vec.clone(), vec.clone()
        up[i] += h
        dn[i] -= h
        g[i] = (loss_fn(up) - loss_fn(dn)) / (2 * h)
    return g


def check_gradients():
    ds = data.make_synthetic(3, 4, 6, 0.6, seed=7)
    batch = data.full_batch(ds)
    ok = True
    for family, widths in (("linear", ()), ("mlp", (5,))):
        spec = models.ArchSpec(family=family, class_count=3, input_shape=(6,),
                               widths=widths, init_seed=1)
        params = models.init_model(spec)
        cfg = objectives.ObjectiveConfig(kind="pgd_at")
        adv = (batch.inputs + 0.01).clamp(0, 1)

        def loss_at(vec):
            p = models.unflatten_like(params, vec)
            return objectives.composite_loss(cfg, p, batch, adv).total

        grads, _ = objectives.grad_params(cfg, params, batch, adv)
        fd = _fd_gradient(loss_at, models.flatten_params(params))
        rel = (grads["total"] - fd).norm() / fd.norm()
        ok = ok and rel.item() < 1e-4
    return ok, f"max rel err vs finite differences < 1e-4: {ok}"


def check_fgsm_pgd1():
    ds = data.make_synthetic(2, 8, 4, 0.5, seed=3)
    batch = data.full_batch(ds)
    params = models.init_model(models.ArchSpec("linear", 2, (4,), init_seed=2))
    spec = attacks.PerturbationSpec(epsilon=0.1, step_size=0.1, steps=1, random_start=False)
    same = torch.equal(attacks.fgsm(params, batch, spec),
                       attacks.pgd_attack(params, batch, spec))
    return same, "fgsm == pgd(steps=1, alpha=eps) bitwise"


def check_feasibility():
    ds = data.make_synthetic(2, 4, 5, 0.5, seed=11)
    batch = data.full_batch(ds)
    worst = 0.0
    for trial in range(100):
        norm = "linf" if trial % 2 == 0 else "l2"
        params = models.init_model(models.ArchSpec("linear", 2, (5,), init_seed=trial))
        spec = attacks.PerturbationSpec(norm=norm, epsilon=0.05 + 0.01 * (trial % 5),
                                        step_size=0.02, steps=4, random_start=True, seed=trial)
        excess = []

        def hook(step, x_adv):
            delta = x_adv - batch.inputs
            if norm == "linf":
                d = delta.abs().max().item()
            else:
                d = delta.reshape(delta.shape[0], -1).norm(dim=1).max().item()
            excess.append(d - spec.epsilon)
            excess.append((x_adv.max().item() - 1.0))
            excess.append((-x_adv.min().item()))

        attacks.pgd_attack(params, batch, spec, iterate_hook=hook)
        worst = max(worst, max(excess))
    return worst <= 1e-9, f"worst constraint excess {worst:.2e} <= 1e-9"


def check_vertex_oracle():
    ok = True
    for trial in range(5):
        ds = data.make_synthetic(3, 3, 6, 0.7, seed=20 + trial)
        batch = data.full_batch(ds)
        params = models.init_model(models.ArchSpec("linear", 3, (6,), init_seed=trial))
        spec = attacks.PerturbationSpec(epsilon=0.1, step_size=0.0125, steps=20,
                                        random_start=True, seed=trial)
        oracle, _ = attacks.vertex_oracle(params, batch, spec)
        adv = attacks.pgd_attack(params, batch, spec)
        achieved = objectives.attack_loss_values("ce", params, adv, batch.labels)
        ok = ok and bool((achieved <= oracle + 1e-9).all())
        ok = ok and (achieved.mean() / oracle.mean()).item() >= 0.99
    return ok, "pgd-20 within 99% of vertex oracle, never above"


def check_kendall():
    g = generator(99)
    ok = True
    for _ in range(10):
        a = torch.randn(100, generator=g)
        b = torch.randn(100, generator=g)
        fast = diagnostics.kendall_tau(a.tolist(), b.tolist())
        # brute-force pair counting
        n = 100
        conc = sum((a[i] - a[j]).sign() * (b[i] - b[j]).sign()
                   for i in range(n) for j in range(i + 1, n))
        brute = float(conc) / (n * (n - 1) / 2)
        ok = ok and abs(fast - brute) < 1e-12
    return ok, "merge-count tau == brute-force pair counting"


def check_spectral():
    g = generator(5)
    w = torch.randn(6, 4, generator=g, dtype=torch.float64)
    sigma, converged = complexity.layer_spectral_norm(w)
    svd = torch.linalg.svdvals(w)[0].item()
    ok = converged and abs(sigma - svd) / svd < 1e-6
    return ok, f"power iteration {sigma:.8f} vs svd {svd:.8f}"


def check_ensemble():
    buf = trainer.EnsembleBuffer.init(2, 2, momentum=0.9)
    q = torch.tensor([[0.2, 0.8], [0.7, 0.3]], dtype=torch.float64)
    ids = torch.tensor([0, 1])
    for epoch in range(5):
        buf = trainer.update_ensemble(buf, ids, q, epoch)
    want = (1 - 0.9 ** 5) * q
    reads, never = trainer.ensemble_read(buf, ids)
    ok = ((buf.raw - want).abs().max().item() < 1e-6
          and (reads - q).abs().max().item() < 1e-6 and not bool(never.any()))
    return ok, "raw = (1 - eta^k) q and normalized read = q"


def check_corruption():
    ds = data.make_synthetic(10, 1000, 4, 0.5, seed=1)
    spec = data.CorruptionSpec(noise_rate=0.5, seed=4)
    out = data.corrupt_labels(ds, spec)
    m = math.floor(0.5 * len(ds))
    changed = int((out.labels != ds.labels).sum())
    p = 1 - 1 / 10
    sigma = math.sqrt(m * p * (1 - p))
    ok = abs(changed - m * p) <= 3 * sigma
    positions = data.corruption_positions(len(ds), spec)
    ok = ok and positions.numel() == m
    untouched = torch.ones(len(ds), dtype=torch.bool)
    untouched[positions] = False
    ok = ok and bool((out.labels[untouched] == ds.labels[untouched]).all())
    return ok, f"changed {changed} of {m} resampled (3-sigma band around {m * p:.0f})"


def check_probs():
    ds = data.make_synthetic(4, 8, 6, 0.5, seed=2)
    params = models.init_model(models.ArchSpec("mlp", 4, (6,), widths=(7,), init_seed=3))
    probs = models.forward_probs(params, ds.inputs)
    ok = (probs.min().item() >= 0.0
          and (probs.sum(dim=1) - 1.0).abs().max().item() < 1e-6)
    return ok, "probability rows sum to 1 within 1e-6"


CHECKS = (
    ("gradients-vs-finite-differences", check_gradients),
    ("fgsm-equals-pgd1", check_fgsm_pgd1),
    ("pgd-feasibility", check_feasibility),
    ("pgd-vs-vertex-oracle", check_vertex_oracle),
    ("kendall-tau-vs-brute-force", check_kendall),
    ("spectral-norm-vs-svd", check_spectral),
    ("ensemble-buffer-geometric", check_ensemble),
    ("label-corruption-statistics", check_corruption),
    ("probability-normalization", check_probs),
)


def run_selftest(out=print):
    failures = 0
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        out(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failures += 0 if ok else 1
    out(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return failures == 0
