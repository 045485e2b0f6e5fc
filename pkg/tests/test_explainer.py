import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import relative_error
from partlens import explainer as E
from partlens import losses
from partlens.errors import CheckpointError, ConfigError, ContractError


def small_net(n=4, in_ch=3, filters=4, seed=0, dtype=torch.float64):
    bank = losses.build_template_bank(n, dtype=dtype)
    arch = E.ExplainerArch(in_channels=in_ch, spatial=n, filters=filters, fc1=6, fc2=4)
    return E.new_explainer(arch, bank, seed=seed, dtype=dtype), bank


class TestMaskLayer:
    def test_all_zero_map(self):
        bank = losses.build_template_bank(5)
        masked, center = E.mask_layer(torch.zeros(5, 5, dtype=torch.float64), bank)
        assert center == (0, 0)
        assert torch.all(masked == 0)

    def test_single_pixel_preserved_and_far_zeroed(self):
        n, beta = 8, 4.0
        bank = losses.build_template_bank(n, beta=beta)
        fmap = torch.zeros(n, n, dtype=torch.float64)
        fmap[3, 5] = 1.7
        masked, center = E.mask_layer(fmap, bank)
        assert center == (3, 5)
        assert float(masked[3, 5]) == 1.7
        # the mask is clamp(T, 0)/tau, zero wherever L1 distance >= n/beta
        cutoff = n / beta
        fmap2 = torch.rand(n, n, dtype=torch.float64)
        fmap2[3, 5] = 10.0  # force the same center
        masked2, _ = E.mask_layer(fmap2, bank)
        for i in range(n):
            for j in range(n):
                if abs(i - 3) + abs(j - 5) >= cutoff:
                    assert float(masked2[i, j]) == 0.0

    def test_masked_never_exceeds_input(self):
        bank = losses.build_template_bank(6)
        fmap = torch.rand(6, 6, dtype=torch.float64)
        masked, _ = E.mask_layer(fmap, bank)
        assert torch.all(masked <= fmap + 1e-15)
        assert torch.all(masked >= 0)

    def test_row_major_tie_break(self):
        bank = losses.build_template_bank(4)
        fmap = torch.zeros(4, 4, dtype=torch.float64)
        fmap[1, 2] = 1.0
        fmap[2, 1] = 1.0  # later in row-major order
        _, center = E.mask_layer(fmap, bank)
        assert center == (1, 2)

    def test_negative_input_rejected(self):
        bank = losses.build_template_bank(3)
        with pytest.raises(ContractError):
            E.mask_layer(torch.full((3, 3), -1.0), bank)

    def test_idempotent_at_peak(self):
        bank = losses.build_template_bank(5)
        fmap = torch.rand(5, 5, dtype=torch.float64)
        once, center = E.mask_layer(fmap, bank)
        twice, center2 = E.mask_layer(once, bank)
        assert center2 == center
        assert float(twice[center]) == float(once[center])


class TestNormLayer:
    def test_identity_at_unit_rms(self):
        x = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        out = E.norm_layer(x, torch.ones(3), torch.ones(3))
        assert torch.equal(out, x)

    def test_scale_invariance_at_stationarity(self):
        x = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        rms = torch.tensor([0.5, 1.0, 2.0], dtype=torch.float64)
        a = E.norm_layer(x, torch.ones(3, dtype=torch.float64), rms)
        b = E.norm_layer(10 * x, torch.ones(3, dtype=torch.float64), 10 * rms)
        assert torch.allclose(a, b, atol=1e-14)

    def test_alpha_doubles_output(self):
        x = torch.randn(3, 5, 5, dtype=torch.float64)
        out = E.norm_layer(x, torch.full((3,), 2.0, dtype=torch.float64), torch.ones(3, dtype=torch.float64))
        assert torch.allclose(out, 2 * x)

    def test_nonpositive_rms_rejected(self):
        x = torch.randn(2, 3, 4, 4)
        with pytest.raises(ContractError):
            E.norm_layer(x, torch.ones(3), torch.tensor([1.0, 0.0, 1.0]))


class TestGate:
    def test_wp_zero_is_mean(self):
        a = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        b = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        x_enc, p = E.gate(a, b, 0.0)
        assert float(p) == 0.5
        assert torch.allclose(x_enc, (a + b) / 2)

    def test_equal_tracks_pass_through(self):
        x = torch.rand(1, 2, 3, 3, dtype=torch.float64)
        for w in (-3.0, 0.0, 4.2):
            x_enc, _ = E.gate(x, x.clone(), w)
            assert torch.allclose(x_enc, x, atol=1e-15)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            E.gate(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 4, 4), 0.0)

    @given(st.floats(-6.0, 6.0), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_convexity(self, w_p, seed):
        rng = np.random.default_rng(seed)
        a = torch.tensor(rng.normal(size=(2, 2, 3, 3)))
        b = torch.tensor(rng.normal(size=(2, 2, 3, 3)))
        x_enc, p = E.gate(a, b, w_p)
        assert 0.0 < float(p) < 1.0
        lo = torch.minimum(a, b)
        hi = torch.maximum(a, b)
        assert torch.all(x_enc >= lo - 1e-12)
        assert torch.all(x_enc <= hi + 1e-12)


class TestTracks:
    def test_interpretable_track_zero_input_zero_bias(self):
        net, _ = small_net()
        with torch.no_grad():
            net.conv_interp1.bias.zero_()
            net.conv_interp2.bias.zero_()
        x = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
        h2m, h2, idx1, idx2 = net.interpretable_track(x)
        assert torch.all(h2m == 0) and torch.all(h2 == 0)
        assert torch.all(idx1 == 0) and torch.all(idx2 == 0)  # ties at (0, 0)

    def test_identity_kernels_keep_peak_location(self):
        net, _ = small_net(n=8, in_ch=2, filters=2)
        with torch.no_grad():
            for conv in (net.conv_interp1, net.conv_interp2):
                conv.weight.zero_()
                conv.bias.zero_()
                for f in range(conv.weight.shape[0]):
                    conv.weight[f, f % conv.weight.shape[1], 1, 1] = 1.0
        x = torch.zeros(1, 2, 8, 8, dtype=torch.float64)
        x[0, 0, 5, 2] = 3.0
        h2m, h2, _, idx2 = net.interpretable_track(x)
        flat = int(h2[0, 0].detach().argmax())
        assert (flat // 8, flat % 8) == (5, 2)
        assert float(h2m[0, 0, 5, 2].detach()) == 3.0

    def test_premask_nonneg_masked_below_premask(self):
        net, _ = small_net(seed=3)
        x = torch.tensor(
            np.random.default_rng(0).normal(size=(4, 3, 4, 4)), dtype=torch.float64
        )
        h2m, h2, _, _ = net.interpretable_track(x)
        assert torch.all(h2 >= 0)
        assert torch.all(h2m <= h2 + 1e-15)

    def test_ordinary_track_zero_input_zero_bias(self):
        net, _ = small_net()
        with torch.no_grad():
            net.conv_ordin.bias.zero_()
        out = net.ordinary_track(torch.zeros(2, 3, 4, 4, dtype=torch.float64))
        assert torch.all(out == 0)

    def test_ordinary_track_constant_through_identity_kernel(self):
        net, _ = small_net(in_ch=1, filters=1)
        with torch.no_grad():
            net.conv_ordin.weight.zero_()
            net.conv_ordin.bias.zero_()
            net.conv_ordin.weight[0, 0, 1, 1] = 1.0
        x = torch.full((1, 1, 4, 4), 0.7, dtype=torch.float64)
        out = net.ordinary_track(x)
        assert torch.allclose(out, x)  # max pool of a constant map

    def test_track_shapes_match_across_sizes(self):
        for n in (4, 6, 8):
            net, _ = small_net(n=n)
            x = torch.rand(2, 3, n, n, dtype=torch.float64)
            trace = net.encode(x)
            assert trace.x_interp.shape == trace.x_ordin.shape == trace.x_enc.shape
            assert trace.x_interp.shape == (2, 4, n, n)


class TestEncodeDecode:
    def test_trace_invariants(self):
        net, _ = small_net(seed=1)
        x = torch.rand(3, 3, 4, 4, dtype=torch.float64)
        trace = net.encode(x)
        assert 0.0 < float(trace.p) < 1.0
        assert torch.all(trace.per_filter_premask >= 0)
        lo = torch.minimum(trace.x_interp, trace.x_ordin)
        hi = torch.maximum(trace.x_interp, trace.x_ordin)
        assert torch.all(trace.x_enc >= lo - 1e-12)
        assert torch.all(trace.x_enc <= hi + 1e-12)
        assert trace.mask_centers.shape == (3, 4, 2)

    def test_decoder_zero_in_zero_bias(self):
        net, _ = small_net()
        with torch.no_grad():
            net.fc_dec1.bias.zero_()
            net.fc_dec2.bias.zero_()
        d1, d2 = net.decode(torch.zeros(2, 4, 4, 4, dtype=torch.float64))
        assert torch.all(d1 == 0) and torch.all(d2 == 0)

    def test_decoder_nonneg_and_widths(self):
        net, _ = small_net(seed=2)
        d1, d2 = net.decode(torch.randn(5, 4, 4, 4, dtype=torch.float64))
        assert d1.shape == (5, 6) and d2.shape == (5, 4)
        assert torch.all(d1 >= 0) and torch.all(d2 >= 0)

    def test_decoder_length_mismatch_rejected(self):
        net, _ = small_net()
        with pytest.raises(ContractError):
            net.decode(torch.zeros(1, 4, 5, 5, dtype=torch.float64))

    def test_bad_tap_shape_rejected(self):
        net, _ = small_net()
        with pytest.raises(ContractError):
            net.encode(torch.zeros(1, 3, 5, 5, dtype=torch.float64))

    def test_eval_forward_is_pure(self):
        net, _ = small_net(seed=5)
        net.eval()
        x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        a = net(x)
        b = net(x)
        assert torch.equal(a.x_fcdec2, b.x_fcdec2)
        assert torch.equal(a.trace.x_enc, b.trace.x_enc)

    def test_update_stats_moves_running_rms(self):
        net, _ = small_net(seed=6)
        before = net.rms_interp.clone()
        net.encode(torch.rand(8, 3, 4, 4, dtype=torch.float64), update_stats=True)
        assert not torch.equal(net.rms_interp, before)
        # momentum 0.99 blend of ones and the batch value
        assert torch.all(net.rms_interp > 0)


class TestJacobian:
    def test_full_explainer_gradient_vs_finite_differences(self):
        net, bank = small_net(n=4, in_ch=3, filters=4, seed=9)
        x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        ref = net(x)
        frozen = (
            E.flat_argmax(torch.relu(net.conv_interp1(x)).detach()),
            E.flat_argmax(ref.trace.per_filter_premask.detach()),
        )

        def probe() -> float:
            with torch.no_grad():
                out = net(x, frozen_centers=frozen)
                return float(out.x_fcdec2.sum())

        out = net(x, frozen_centers=frozen)
        loss = out.x_fcdec2.sum()
        net.zero_grad()
        loss.backward()

        params = [p for p in net.parameters() if p.grad is not None]
        rng = np.random.default_rng(17)
        checked = 0
        h = 1e-6
        while checked < 20:
            p = params[int(rng.integers(len(params)))]
            flat_idx = int(rng.integers(p.numel()))
            an = float(p.grad.flatten()[flat_idx])
            with torch.no_grad():
                orig = float(p.flatten()[flat_idx])
                p.view(-1)[flat_idx] = orig + h
                f_plus = probe()
                p.view(-1)[flat_idx] = orig - h
                f_minus = probe()
                p.view(-1)[flat_idx] = orig
            fd = (f_plus - f_minus) / (2 * h)
            if abs(an) < 1e-12 and abs(fd) < 1e-8:
                checked += 1
                continue
            assert relative_error(an, fd) < 1e-4
            checked += 1


class TestCheckpointRoundTrip:
    def test_save_load_bit_exact(self, tmp_path):
        net, _ = small_net(seed=12, dtype=torch.float32)
        net.rms_interp.mul_(1.3)  # make the stats non-trivial
        E.save_explainer(
            net,
            tmp_path / "ck",
            seed=12,
            performer_digest="deadbeef",
            assignment=np.array([0, 1, 0, 1]),
            metrics={"p": net.p},
        )
        loaded, meta = E.load_explainer(tmp_path / "ck")
        for k, v in net.state_arrays().items():
            assert np.array_equal(v, loaded.state_arrays()[k]), k
        assert meta["performer_digest"] == "deadbeef"
        assert meta["assignment"] == [0, 1, 0, 1]
        assert meta["reconstruction_target"] == "post_relu"

    def test_tampered_manifest_rejected(self, tmp_path):
        net, _ = small_net(seed=12, dtype=torch.float32)
        E.save_explainer(
            net,
            tmp_path / "ck",
            seed=12,
            performer_digest="d",
            assignment=np.zeros(4),
            metrics={},
        )
        mpath = tmp_path / "ck" / "manifest.json"
        mpath.write_text(mpath.read_text().replace('"params_sha256": "', '"params_sha256": "0'))
        with pytest.raises(CheckpointError):
            E.load_explainer(tmp_path / "ck")

    def test_bank_size_mismatch_rejected(self):
        bank = losses.build_template_bank(5)
        arch = E.ExplainerArch(in_channels=3, spatial=4, filters=4, fc1=6, fc2=4)
        with pytest.raises(ConfigError):
            E.ExplainerNet(arch, bank)
