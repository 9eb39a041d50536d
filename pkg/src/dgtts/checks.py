"""Self-contained analytic validation suite behind ``dgtts check``.

Each check returns a :class:`CheckResult`; the suite reports all of them and
fails on the first one that does not pass.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import asdict, dataclass
from typing import Callable

import mpmath
import torch

from .config import ModelConfig
from .diffusion import (
    DiffusionSchedule,
    diffuse_closed_form,
    diffuse_stepwise,
    make_variance_schedule,
    posterior_params,
)
from .gradcheck_suite import run_block_checks
from .losses import feature_matching_loss, generator_total_loss, lsgan_d_loss
from .models import DiscriminatorOutput
from .numerics import DTYPE

SCHEDULE_TS = (1, 2, 4, 1000)
REL_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def reference_betas(T: int, beta_min: float = 0.1, beta_max: float = 40.0, dps: int = 50) -> list:
    """Arbitrary-precision ``beta_1..beta_T`` from the closed form."""
    with mpmath.workdps(dps):
        bmin, bmax = mpmath.mpf(beta_min), mpmath.mpf(beta_max)
        return [1 - mpmath.exp(-bmin / T - (bmax - bmin) * (2 * t - 1) / (2 * T * T)) for t in range(1, T + 1)]


def check_schedule(maker: Callable[..., DiffusionSchedule] = make_variance_schedule) -> CheckResult:
    worst = 0.0
    for T in SCHEDULE_TS:
        sched = maker(T, 0.1, 40.0)
        ref = reference_betas(T)
        for t in range(1, T + 1):
            r = ref[t - 1]
            err = float(abs(mpmath.mpf(sched.beta[t].item()) - r) / abs(r))
            worst = max(worst, err)
    ok = worst < REL_TOL
    return CheckResult("schedule", ok, f"max relative beta error {worst:.2e} over T in {SCHEDULE_TS}")


def check_posterior(maker: Callable[..., DiffusionSchedule] = make_variance_schedule) -> CheckResult:
    gen = torch.Generator().manual_seed(0)
    worst_var, collapse_ok = 0.0, True
    for T in SCHEDULE_TS:
        s = maker(T, 0.1, 40.0)
        x0 = torch.randn(4, 8, generator=gen, dtype=DTYPE)
        xt = torch.randn(4, 8, generator=gen, dtype=DTYPE)
        post = posterior_params(x0, xt, 1, s)
        collapse_ok &= bool(torch.equal(post.mean, x0)) and float(post.variance) == 0.0
        for t in range(2, T + 1):
            ab = mpmath.mpf(s.alpha_bar[t].item())
            ab_prev = mpmath.mpf(s.alpha_bar[t - 1].item())
            direct = (1 - ab_prev) / (1 - ab) * mpmath.mpf(s.beta[t].item())
            got = posterior_params(x0, xt, t, s).variance
            worst_var = max(worst_var, float(abs(mpmath.mpf(float(got)) - direct) / direct))
    ok = collapse_ok and worst_var < REL_TOL
    return CheckResult("posterior", ok, f"t=1 collapse {'exact' if collapse_ok else 'BROKEN'}, "
                                        f"max relative variance error {worst_var:.2e}")


def check_moments(n: int = 100000, T: int = 4, seed: int = 1,
                  maker: Callable[..., DiffusionSchedule] = make_variance_schedule) -> CheckResult:
    """Stepwise chain versus closed form: means within 4 sigma/sqrt(n),
    variances within 2%."""
    s = maker(T, 0.1, 40.0)
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.randn(8, 16, generator=gen, dtype=DTYPE)
    x = x0.expand(n, 8, 16).clone()
    worst_mean, worst_var = 0.0, 0.0
    for t in range(1, T + 1):
        x = diffuse_stepwise(x, t, s, torch.randn(x.shape, generator=gen, dtype=DTYPE))
        mean_ref = torch.sqrt(s.alpha_bar[t]) * x0
        var_ref = s.one_minus_alpha_bar[t]
        z = ((x.mean(0) - mean_ref) / torch.sqrt(var_ref / n)).abs().max().item()
        v = ((x.var(0) - var_ref) / var_ref).abs().max().item()
        worst_mean, worst_var = max(worst_mean, z), max(worst_var, v)
    # closed-form draws must show the same variance
    xc = diffuse_closed_form(x0.expand(n, 8, 16), T, s, torch.randn(n, 8, 16, generator=gen, dtype=DTYPE))
    vc = ((xc.var(0) - s.one_minus_alpha_bar[T]) / s.one_minus_alpha_bar[T]).abs().max().item()
    ok = worst_mean < 4.0 and worst_var < 0.02 and vc < 0.02
    return CheckResult("moments", ok, f"max |z| of means {worst_mean:.2f}, max relative variance "
                                      f"error {max(worst_var, vc):.3%} (n={n})")


def check_gradients(max_coords: int = 6, seed: int = 0) -> CheckResult:
    reports = run_block_checks(ModelConfig.tiny(), max_coords=max_coords, seed=seed)
    bad = [name for name, r in reports.items() if not r.passed]
    worst = max(r.max_error for r in reports.values())
    detail = f"{len(reports)} blocks, max relative error {worst:.2e}"
    if bad:
        detail += f"; failing: {', '.join(bad)}"
    return CheckResult("gradients", not bad, detail)


def check_loss_identities() -> CheckResult:
    gen = torch.Generator().manual_seed(1)
    feats = [torch.randn(2, 4, 6, generator=gen, dtype=DTYPE) for _ in range(3)]
    fm0 = float(feature_matching_loss(feats, [f.clone() for f in feats]))
    ones, zeros = torch.ones(2, 1, 5, dtype=DTYPE), torch.zeros(2, 1, 5, dtype=DTYPE)
    ld = float(lsgan_d_loss(DiscriminatorOutput(ones, ones), DiscriminatorOutput(zeros, zeros)))
    fm = feature_matching_loss(feats, [f + 0.3 for f in feats])
    recon = torch.tensor(1.7, dtype=DTYPE)
    _, lam = generator_total_loss(torch.tensor(0.0, dtype=DTYPE), recon, fm)
    balance = abs(lam * float(fm) - float(recon)) / float(recon)
    ok = fm0 == 0.0 and ld == 0.0 and balance <= 2 * sys.float_info.epsilon
    return CheckResult("losses", ok, f"L_fm(identical)={fm0}, L_D(perfect)={ld}, "
                                     f"|lambda_fm*L_fm - L_recon|/L_recon={balance:.1e}")


@dataclass
class SuiteReport:
    results: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def first_failure(self) -> CheckResult | None:
        return next((r for r in self.results if not r.passed), None)

    def text(self) -> str:
        lines = [f"[{'PASS' if r.passed else 'FAIL'}] {r.name:<10} {r.detail} ({r.seconds:.2f}s)"
                 for r in self.results]
        fail = self.first_failure
        lines.append("all checks passed" if fail is None else f"first failing check: {fail.name}")
        return "\n".join(lines)

    def json(self) -> str:
        fail = self.first_failure
        return json.dumps({"passed": self.passed, "first_failure": fail.name if fail else None,
                           "checks": [asdict(r) for r in self.results]}, indent=1)


def run_checks(schedule_maker: Callable[..., DiffusionSchedule] = make_variance_schedule,
               gradients: bool = True) -> SuiteReport:
    """Run the suite; ``schedule_maker`` is injectable so a broken schedule can
    be shown to fail it."""
    jobs = [
        lambda: check_schedule(schedule_maker),
        lambda: check_posterior(schedule_maker),
        lambda: check_moments(maker=schedule_maker),
        check_loss_identities,
    ]
    if gradients:
        jobs.append(check_gradients)
    results = []
    for job in jobs:
        t0 = time.perf_counter()
        r = job()
        r.seconds = time.perf_counter() - t0
        results.append(r)
    return SuiteReport(results)
