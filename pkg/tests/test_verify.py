"""The verification suites themselves, plus negative controls proving the
suites can actually catch the defects they exist to catch."""
from __future__ import annotations

import numpy as np
import pytest

from spi import autodiff as ad
from spi import verify
from spi.config import derived_rng
from spi.inference import SelectionOutcome, select_knowledge
from spi.model import ModelParams, decode_logprob
from spi.verify import (CheckResult, check_determinism, check_gradients,
                        check_langevin, check_selection,
                        naive_response_logprob, naive_select, naive_top_s)


class TestCheckResult:
    def test_line_format(self):
        assert CheckResult("x", True, "ok").line() == "[PASS] x: ok"
        assert CheckResult("x", False, "bad").line() == "[FAIL] x: bad"


class TestNaiveOracle:
    def test_agrees_with_the_taped_decoder(self):
        rng = derived_rng(99, 1)
        for seed in range(5):
            cfg = verify._tiny_model_config()
            params = ModelParams.init(cfg, seed=seed)
            example = verify._random_example(rng, cfg.vocab_size)
            z = rng.normal(size=cfg.latent_dim)
            for s in range(len(example.candidates)):
                naive = naive_response_logprob(params, example, s, z)
                taped = float(decode_logprob(params, example, s, z).data)
                assert naive == pytest.approx(taped, abs=1e-10)

    def test_naive_select_prefers_lowest_index_on_ties(self):
        rng = derived_rng(7, 2)
        cfg = verify._tiny_model_config()
        params = ModelParams.init(cfg, seed=0)
        example = verify._random_example(rng, cfg.vocab_size, m=3)
        example.candidates = [list(example.candidates[0])] * 3
        assert naive_select(params, example, "uniform") == 0

    def test_naive_top_s_full_width_is_identity(self):
        rng = derived_rng(7, 3)
        cfg = verify._tiny_model_config()
        params = ModelParams.init(cfg, seed=1)
        example = verify._random_example(rng, cfg.vocab_size, m=4)
        assert naive_top_s(params, example, 4) == [0, 1, 2, 3]


class TestSuitesPass:
    def test_gradients(self):
        result = check_gradients(n_seeds=1)
        assert result.passed, result.detail

    def test_langevin(self):
        result = check_langevin(n_seeds=3, steps=4_000, burn_in=1_000, min_passes=3)
        assert result.passed, result.detail

    def test_selection(self):
        result = check_selection(n_instances=20)
        assert result.passed, result.detail

    def test_determinism(self):
        result = check_determinism()
        assert result.passed, result.detail


class TestNegativeControls:
    def test_sign_flip_in_prior_gradient_is_caught(self, monkeypatch):
        true_vjp = ad._squared_l2_vjp

        def flipped(*args, **kwargs):
            return [-g for g in true_vjp(*args, **kwargs)]

        monkeypatch.setattr(ad, "_squared_l2_vjp", flipped)
        result = check_gradients(n_seeds=1, priors=("uniform",))
        assert not result.passed
        assert "rel err" in result.detail

    def test_wrong_tie_break_is_caught(self):
        def highest_index_on_ties(params, example, *, prior, mode, top_s=None,
                                  **kwargs):
            out = select_knowledge(params, example, prior=prior, mode=mode,
                                   top_s=top_s, **kwargs)
            weights = np.asarray(out.log_weights)
            best = max(i for i in range(len(weights))
                       if weights[i] >= weights.max() - 1e-12)
            return SelectionOutcome(chosen=out.evaluated[best],
                                    evaluated=out.evaluated,
                                    log_weights=out.log_weights)

        result = check_selection(n_instances=20, select_fn=highest_index_on_ties)
        assert not result.passed
        assert "mismatch" in result.detail

    def test_biased_langevin_chain_is_caught(self, monkeypatch):
        true_chain = verify.langevin_chain

        def shifted(mu, grad_loglik, **kwargs):
            return true_chain(np.asarray(mu) + 0.5, grad_loglik, **kwargs)

        monkeypatch.setattr(verify, "langevin_chain", shifted)
        result = check_langevin(n_seeds=3, steps=3_000, burn_in=1_000, min_passes=3)
        assert not result.passed
