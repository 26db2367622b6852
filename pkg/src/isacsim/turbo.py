"""Joint-support message passing (Module B) and the turbo E-step scheduler.

Module B runs exact sum-product inference on the per-grid-point star graphs
coupling the users' support bits through a shared OR-style activity bit: the
shared bit has prior lambda_q, and given activity each user participates with
probability lambda_kq (inactivity forces every user's bit to zero). Messages
are Bernoulli extrinsics exchanged with the variational module in the
log-odds domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vbi import (
    LOG_ODDS_CLAMP,
    BggHyperParams,
    BilinearModel,
    VariationalState,
    _clamped_logit,
    _sigmoid,
    bisvbi_sweep,
)


def log_odds(p):
    """Probability -> clamped log-odds."""
    return _clamped_logit(p)


def probability(lo):
    """Log-odds -> probability."""
    return _sigmoid(np.clip(lo, -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP))


@dataclass
class TurboBeliefs:
    """Extrinsic Bernoulli messages per (user, grid point), stored as log-odds.

    h_a flows from the support module into the variational module (prior),
    h_b the other way (likelihood). Joint activity beliefs per grid point are
    refreshed by every Module-B pass.
    """

    h_a: np.ndarray  # (K, Q) log-odds
    h_b: np.ndarray  # (K, Q) log-odds
    joint_belief: np.ndarray  # (Q,) probability of the shared bit

    @staticmethod
    def neutral(n_users: int, n_grid: int, hyper: BggHyperParams) -> "TurboBeliefs":
        p1 = hyper.lambda_q * hyper.lambda_kq
        return TurboBeliefs(
            h_a=np.full((n_users, n_grid), float(log_odds(p1))),
            h_b=np.zeros((n_users, n_grid)),
            joint_belief=np.full(n_grid, hyper.lambda_q),
        )

    def prior_probs(self, hyper: BggHyperParams) -> np.ndarray:
        """Support priors for the variational module, (K, Q+1); LoS column 0."""
        k = self.h_a.shape[0]
        probs = np.empty((k, self.h_a.shape[1] + 1))
        probs[:, 0] = hyper.lambda_k0
        probs[:, 1:] = probability(self.h_a)
        return probs


def extrinsic_a_to_b(lambda_check: np.ndarray, h_a: np.ndarray) -> np.ndarray:
    """Posterior minus prior in the log-odds domain, clamped.

    lambda_check and h_a cover the grid columns only (no LoS column).
    """
    return np.clip(
        log_odds(lambda_check) - np.clip(h_a, -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP),
        -LOG_ODDS_CLAMP,
        LOG_ODDS_CLAMP,
    )


def module_b_pass(h_b: np.ndarray, hyper: BggHyperParams):
    """Exact sum-product on every star graph; returns (h_a, joint_belief).

    For grid point q with incoming likelihoods p_k = P(s_k = 1):
      message to user k with the shared bit marginalized, excluding k's own
      input:
        nu_k(1) = lambda_q * lambda_kq * prod_{j != k} m_j
        nu_k(0) = (1 - lambda_q) * prod_{j != k} (1 - p_j)
                  + lambda_q * (1 - lambda_kq) * prod_{j != k} m_j
      with m_j = lambda_kq * p_j + (1 - lambda_kq) * (1 - p_j).
    """
    p = probability(h_b)  # (K, Q)
    lam_q = hyper.lambda_q
    lam_kq = hyper.lambda_kq
    m = lam_kq * p + (1.0 - lam_kq) * (1.0 - p)
    with np.errstate(divide="ignore"):
        ln_m = np.log(m)
        ln_off = np.log(1.0 - p)
    sum_ln_m = np.sum(ln_m, axis=0, keepdims=True)
    sum_ln_off = np.sum(ln_off, axis=0, keepdims=True)
    # leave-one-out products in the log domain
    loo_m = sum_ln_m - ln_m
    loo_off = sum_ln_off - ln_off
    with np.errstate(over="ignore", invalid="ignore"):
        nu1 = lam_q * lam_kq * np.exp(loo_m)
        nu0 = (1.0 - lam_q) * np.exp(loo_off) + lam_q * (1.0 - lam_kq) * np.exp(loo_m)
    with np.errstate(divide="ignore", invalid="ignore"):
        h_a = np.log(nu1) - np.log(nu0)
    h_a = np.clip(np.nan_to_num(h_a, nan=0.0), -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP)
    # joint activity belief uses all inputs
    with np.errstate(over="ignore"):
        b1 = lam_q * np.exp(sum_ln_m[0])
        b0 = (1.0 - lam_q) * np.exp(sum_ln_off[0])
    joint = np.where(b1 + b0 > 0, b1 / np.maximum(b1 + b0, 1e-300), lam_q)
    return h_a, joint


def turbo_e_step(
    state: VariationalState,
    model: BilinearModel,
    hyper: BggHyperParams,
    beliefs: TurboBeliefs,
    outer_turbo_iters: int = 2,
    inner_iters: int = 3,
    mode: str = "subspace",
    b_steps: int = 5,
    support_multiplier: float = 2.5,
    support_rule: str = "noise_power",
    use_module_b: bool = True,
    message_tol: float = 1e-6,
    update_cb=None,
):
    """Alternate the variational module and the support module.

    The LoS support bits bypass Module B entirely (their prior stays
    lambda_k0). With use_module_b=False the extrinsic priors stay fixed at the
    i.i.d. values, which disables the joint-sparsity coupling.
    """
    for _ in range(max(outer_turbo_iters, 1)):
        h_a_probs = beliefs.prior_probs(hyper)
        state = bisvbi_sweep(
            state,
            model,
            hyper,
            h_a_probs,
            inner_iters=inner_iters,
            mode=mode,
            b_steps=b_steps,
            support_multiplier=support_multiplier,
            support_rule=support_rule,
            update_cb=update_cb,
        )
        if not use_module_b:
            break
        beliefs.h_b = extrinsic_a_to_b(state.lambda_check[:, 1:], beliefs.h_a)
        h_a_new, joint = module_b_pass(beliefs.h_b, hyper)
        delta = float(np.max(np.abs(h_a_new - beliefs.h_a))) if beliefs.h_a.size else 0.0
        beliefs.h_a = h_a_new
        beliefs.joint_belief = joint
        if delta < message_tol:
            break
    return state, beliefs
