import numpy as np
import pytest

from hddm.conversion import ConversionConfig, eps_to_velocity
from hddm.errors import NumericError, SelectionError, SpecError
from hddm.evaluation import (
    OracleEpsilonExpert,
    OracleRouter,
    OracleVelocityExpert,
    UniformRouter,
    frechet_from_moments,
)
from hddm.objectives import Objective
from hddm.oracle import MixtureOracle
from hddm.sampler import (
    Full,
    SamplerConfig,
    Threshold,
    Top1,
    TopK,
    Trajectory,
    cfg_combine,
    fused_velocity,
    sample,
)
from hddm.schedules import Schedule

LINEAR = Schedule.linear()


def two_blob_oracle():
    return MixtureOracle([0.5, 0.5], [[-4.0, 0.0], [4.0, 0.0]], [[0.2, 0.2]] * 2)


class StubExpert:
    def __init__(self, value, objective=Objective.VELOCITY, dim=2):
        self.value = np.asarray(value, dtype=np.float64)
        self.objective = objective
        self.schedule = LINEAR
        self.data_dim = dim

    def predict(self, x, t, cond=None, use_ema=True):
        return np.tile(self.value, (len(np.atleast_2d(x)), 1))


class TestCfgCombine:
    def test_scale_one_is_conditional(self):
        v_c, v_u = np.array([1.0, 2.0]), np.array([-1.0, 0.0])
        np.testing.assert_array_equal(cfg_combine(v_c, v_u, 1.0), v_c)

    def test_scale_zero_is_unconditional(self):
        v_c, v_u = np.array([1.0, 2.0]), np.array([-1.0, 0.0])
        np.testing.assert_array_equal(cfg_combine(v_c, v_u, 0.0), v_u)

    def test_scalar_arithmetic(self):
        assert cfg_combine(np.array([1.0]), np.array([0.0]), 7.5)[0] == pytest.approx(7.5)


class TestFusedVelocity:
    def test_single_expert_passthrough(self):
        orc = MixtureOracle([1.0], [[2.0, -1.0]], [[0.3, 0.3]])
        expert = OracleVelocityExpert(orc)
        cfg = SamplerConfig(selection=Full(), cfg_scale=0.0)
        x = np.array([[0.5, 0.5], [-1.0, 2.0]])
        u = fused_velocity(x, 0.4, [expert], UniformRouter(1), None, cfg)
        np.testing.assert_allclose(u, expert.predict(x, 0.4), atol=1e-12)

    def test_single_eps_expert_is_converted(self):
        orc = MixtureOracle([1.0], [[2.0, -1.0]], [[0.3, 0.3]])
        expert = OracleEpsilonExpert(orc, 0)
        cfg = SamplerConfig(selection=Full(), conversion=ConversionConfig.exact())
        x = np.array([[0.5, 0.5]])
        u = fused_velocity(x, 0.4, [expert], UniformRouter(1), None, cfg)
        expected = eps_to_velocity(x, expert.predict(x, 0.4), 0.4, LINEAR, ConversionConfig.exact())
        np.testing.assert_allclose(u, expected, atol=1e-12)

    def test_oracle_standins_recover_marginal(self):
        orc = MixtureOracle(
            np.full(8, 0.125),
            5.0 * np.stack([np.cos(np.arange(8) * np.pi / 4), np.sin(np.arange(8) * np.pi / 4)], 1),
            np.full((8, 2), 0.1),
        )
        experts = [OracleVelocityExpert(orc, k) for k in range(8)]
        cfg = SamplerConfig(selection=Full())
        rng = np.random.default_rng(0)
        x = rng.normal(scale=3.0, size=(200, 2))
        for t in (0.1, 0.5, 0.9):
            u = fused_velocity(x, t, experts, OracleRouter(orc), None, cfg)
            np.testing.assert_allclose(u, orc.optimal_velocity_marginal(x, t), atol=1e-10)

    def test_top1_equals_argmax_expert_and_logit_scale_invariance(self):
        orc = two_blob_oracle()
        experts = [OracleVelocityExpert(orc, k) for k in range(2)]
        router = OracleRouter(orc)
        cfg = SamplerConfig(selection=Top1())
        x = np.array([[3.5, 0.2], [-3.8, -0.1]])
        t = 0.3
        u = fused_velocity(x, t, experts, router, None, cfg)
        best = np.argmax(router.probabilities(x, t), axis=1)
        for i, k in enumerate(best):
            np.testing.assert_allclose(u[i], experts[k].predict(x[i : i + 1], t)[0], atol=1e-12)

        class PowerRouter:  # p^c renormalized == softmax of scaled logits
            def __init__(self, base, c):
                self.base, self.c = base, c
                self.n_experts = base.n_experts

            def probabilities(self, x, t):
                p = self.base.probabilities(x, t) ** self.c
                return p / p.sum(axis=1, keepdims=True)

        u_scaled = fused_velocity(x, t, experts, PowerRouter(router, 3.7), None, cfg)
        np.testing.assert_array_equal(u, u_scaled)

    def test_weights_renormalized(self):
        orc = two_blob_oracle()
        experts = [OracleVelocityExpert(orc, k) for k in range(2)]
        out: list = []
        cfg = SamplerConfig(selection=Top1())
        fused_velocity(np.array([[1.0, 0.0]]), 0.5, experts, OracleRouter(orc), None, cfg, weights_out=out)
        np.testing.assert_allclose(out[0].sum(axis=1), 1.0, atol=1e-12)

    def test_topk_bounds_checked(self):
        orc = two_blob_oracle()
        experts = [OracleVelocityExpert(orc, k) for k in range(2)]
        cfg = SamplerConfig(selection=TopK(3))
        with pytest.raises(SpecError):
            fused_velocity(np.zeros((1, 2)), 0.5, experts, OracleRouter(orc), None, cfg)

    def test_threshold_missing_family_is_selection_error(self):
        experts = [StubExpert([0.0, 0.0], objective=Objective.VELOCITY)]
        cfg = SamplerConfig(selection=Threshold(0.5))
        with pytest.raises(SelectionError):
            fused_velocity(np.zeros((1, 2)), 0.2, experts, None, None, cfg)  # wants eps at low t


class TestSample:
    def test_zero_velocity_stub_is_fixed_point(self):
        expert = StubExpert([0.0, 0.0])
        cfg = SamplerConfig(steps=20, batch=4, seed=1, selection=Full(), cfg_scale=0.0)
        traj = sample([expert], UniformRouter(1), cfg)
        for i in range(21):
            np.testing.assert_array_equal(traj.states[i], traj.states[0])

    def test_single_gaussian_oracle_transport(self):
        orc = MixtureOracle([1.0], [[2.0, -1.0]], [[0.1, 0.1]])
        cfg = SamplerConfig(steps=500, batch=1024, seed=2, selection=Full(), cfg_scale=0.0)
        traj = sample([OracleVelocityExpert(orc)], UniformRouter(1), cfg)
        mu, cov = orc.data_moments()
        fit_mu = traj.terminal.mean(axis=0)
        fit_cov = np.cov(traj.terminal, rowvar=False)
        assert frechet_from_moments(fit_mu, fit_cov, mu, cov) < 0.05

    def test_selection_coherence(self):
        orc = two_blob_oracle()
        experts = [OracleVelocityExpert(orc, k) for k in range(2)]
        router = OracleRouter(orc)

        def run(selection):
            cfg = SamplerConfig(steps=25, batch=16, seed=3, selection=selection, cfg_scale=0.0)
            return sample(experts, router, cfg).terminal

        np.testing.assert_array_equal(run(TopK(2)), run(Full()))
        np.testing.assert_array_equal(run(TopK(1)), run(Top1()))

    def test_weights_sum_to_one_every_step(self):
        orc = two_blob_oracle()
        experts = [OracleVelocityExpert(orc, k) for k in range(2)]
        cfg = SamplerConfig(steps=30, batch=8, seed=4, selection=TopK(1), cfg_scale=0.0)
        traj = sample(experts, OracleRouter(orc), cfg)
        np.testing.assert_allclose(traj.weights.sum(axis=2), 1.0, atol=1e-12)

    def test_discretization_error_shrinks_with_steps(self):
        orc = two_blob_oracle()
        expert = OracleVelocityExpert(orc)
        mu, cov = orc.data_moments()
        values = []
        for steps in (25, 50, 100):
            cfg = SamplerConfig(steps=steps, batch=768, seed=5, selection=Full(), cfg_scale=0.0)
            term = sample([expert], UniformRouter(1), cfg).terminal
            values.append(frechet_from_moments(term.mean(0), np.cov(term, rowvar=False), mu, cov))
        assert values[1] <= values[0] * 1.1
        assert values[2] <= values[1] * 1.1

    def test_threshold_switch_usage_log(self):
        orc = two_blob_oracle()
        experts = [OracleEpsilonExpert(orc, 0), OracleVelocityExpert(orc, 1)]
        cfg = SamplerConfig(steps=10, batch=4, seed=6, selection=Threshold(0.5), cfg_scale=0.0)
        traj = sample(experts, None, cfg)
        for i, t in enumerate(traj.ts[:-1]):
            if t > 0.5:
                assert traj.experts_used[i].tolist() == [False, True]
            else:
                assert traj.experts_used[i].tolist() == [True, False]

    def test_threshold_order_reversal(self):
        orc = two_blob_oracle()
        experts = [OracleEpsilonExpert(orc, 0), OracleVelocityExpert(orc, 1)]
        cfg = SamplerConfig(steps=10, batch=4, seed=6, selection=Threshold(0.5, ddpm_first=True), cfg_scale=0.0)
        traj = sample(experts, None, cfg)
        for i, t in enumerate(traj.ts[:-1]):
            assert traj.experts_used[i].tolist() == ([True, False] if t > 0.5 else [False, True])

    def test_deterministic_reruns(self):
        orc = two_blob_oracle()
        experts = [OracleVelocityExpert(orc, k) for k in range(2)]
        cfg = SamplerConfig(steps=15, batch=8, seed=7, selection=Full(), cfg_scale=0.0)
        a = sample(experts, OracleRouter(orc), cfg)
        b = sample(experts, OracleRouter(orc), cfg)
        np.testing.assert_array_equal(a.states, b.states)

    def test_nonfinite_abort_names_step(self):
        expert = StubExpert([np.inf, np.inf])
        cfg = SamplerConfig(steps=5, batch=2, seed=8, selection=Full(), cfg_scale=0.0)
        with pytest.raises(NumericError, match="step 0"):
            sample([expert], UniformRouter(1), cfg)

    def test_audit_csv(self, tmp_path):
        orc = two_blob_oracle()
        experts = [OracleEpsilonExpert(orc, 0), OracleVelocityExpert(orc, 1)]
        cfg = SamplerConfig(steps=8, batch=4, seed=9, selection=Threshold(0.4), cfg_scale=0.0)
        traj = sample(experts, None, cfg)
        path = tmp_path / "audit.csv"
        traj.audit_to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,t,experts_used,w0,w1,velocity_norm,clamp_hit_rate"
        assert len(lines) == 9

    def test_config_validation(self):
        with pytest.raises(SpecError):
            SamplerConfig(steps=0)
        with pytest.raises(SpecError):
            SamplerConfig(cfg_scale=-1.0)
        with pytest.raises(SpecError):
            SamplerConfig(selection=Threshold(1.5))
        study = SamplerConfig.conversion_study(seed=3)
        assert (study.steps, study.cfg_scale) == (75, 6.0)
