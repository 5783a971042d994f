import numpy as np
import pytest

from specdec import ConfigError, SyntheticBackend, SyntheticModelSpec, calibrate_preset
from specdec.synthetic import interpolated_profile, mix64, uniform_profile


def make_backend(n_layers=8, vocab=64, seed=7, profile=None):
    profile = profile or uniform_profile(n_layers, 0.5)
    return SyntheticBackend(
        SyntheticModelSpec(
            n_layers=n_layers, vocab_size=vocab, seed=seed, agreement_profile=profile
        )
    )


class TestSpecValidation:
    def test_final_layer_alpha_must_be_one(self):
        profile = uniform_profile(8, 0.5)
        profile[8] = 0.9
        with pytest.raises(ConfigError, match="final layer"):
            SyntheticModelSpec(n_layers=8, vocab_size=16, seed=0, agreement_profile=profile)

    def test_profile_must_cover_all_layers(self):
        with pytest.raises(ConfigError, match="every layer"):
            SyntheticModelSpec(n_layers=8, vocab_size=16, seed=0, agreement_profile={8: 1.0})


class TestPredictions:
    def test_pure_function_across_instances(self):
        a = make_backend(seed=21)
        b = make_backend(seed=21)
        ctx = [5, 1, 2, 9, 9]
        for layer in range(1, 9):
            assert a.predict_token(layer, ctx) == b.predict_token(layer, ctx)

    def test_full_agreement_always_matches_truth(self):
        backend = make_backend(profile=uniform_profile(8, 1.0))
        rng = np.random.default_rng(0)
        for _ in range(200):
            ctx = [int(t) for t in rng.integers(0, 64, size=5)]
            truth = backend.predict_token(8, ctx)
            assert all(backend.predict_token(l, ctx) == truth for l in range(1, 8))

    def test_zero_agreement_never_matches_truth(self):
        profile = uniform_profile(8, 0.0)
        backend = make_backend(profile=profile)
        rng = np.random.default_rng(1)
        for _ in range(200):
            ctx = [int(t) for t in rng.integers(0, 64, size=5)]
            truth = backend.predict_token(8, ctx)
            assert all(backend.predict_token(l, ctx) != truth for l in range(1, 8))

    def test_monte_carlo_agreement_tracks_profile(self):
        # alpha(l) = l / n_layers, 10k contexts, within +/-2% absolute.
        n_layers = 8
        profile = {l: l / n_layers for l in range(1, n_layers + 1)}
        backend = make_backend(seed=13, profile=profile)
        rng = np.random.default_rng(99)
        contexts = [[int(t) for t in rng.integers(0, 64, size=6)] for _ in range(10_000)]
        truths = [backend.predict_token(n_layers, c) for c in contexts]
        for layer in range(1, n_layers):
            hits = sum(
                1 for c, t in zip(contexts, truths) if backend.predict_token(layer, c) == t
            )
            assert abs(hits / len(contexts) - profile[layer]) < 0.02

    def test_degenerate_distribution_forces_top1(self):
        from specdec import AcceptancePolicy, top_predictions

        backend = make_backend()
        dist = backend.synth_predict(3, [1, 2, 3])
        assert dist.degenerate
        assert top_predictions(dist, AcceptancePolicy(mode="top_k", k=5)) == (dist.argmax(),)

    def test_exit_distribution_matches_synth_predict(self):
        backend = make_backend()
        state = backend.new_state()
        state.set_tokens([4, 5, 6, 7])
        backend.forward_range(state, 1, 8, 0, 4)
        direct = backend.synth_predict(3, [4, 5, 6, 7])
        via_state = backend.exit_distribution(state, 3, 3)
        assert direct.argmax() == via_state.argmax()


class TestPresets:
    def test_quarter_depth_anchor(self):
        spec = calibrate_preset("quarter-depth-69", n_layers=32)
        assert spec.alpha(8) == 0.69
        assert spec.alpha(32) == 1.0
        assert all(spec.alpha(l) <= spec.alpha(l + 1) + 1e-12 for l in range(1, 32))

    def test_llama70b_anchors(self):
        spec = calibrate_preset("llama70b-sharegpt")
        assert spec.n_layers == 80
        assert spec.alpha(10) == 0.397
        assert spec.alpha(20) == 0.581
        assert spec.alpha(80) == 1.0

    def test_unknown_preset_lists_available(self):
        with pytest.raises(ConfigError, match="quarter-depth-69.*llama70b-sharegpt"):
            calibrate_preset("nope")


class TestProfiles:
    def test_interpolation_hits_anchors_and_clamps(self):
        profile = interpolated_profile(10, {2: 0.2, 6: 0.6, 10: 1.0})
        assert profile[2] == pytest.approx(0.2)
        assert profile[6] == pytest.approx(0.6)
        assert profile[4] == pytest.approx(0.4)
        assert 0.0 <= profile[1] <= 1.0
        assert profile[10] == 1.0

    def test_mix64_reference_values(self):
        # fmix64 with the published constants; spot values pin the construction.
        assert mix64(0) == 0
        assert mix64(1) == 12994781566227106604
        assert mix64(2**64 - 1) == 7256831767414464289
