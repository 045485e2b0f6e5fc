import numpy as np
import pytest
import torch

from oracles import relative_error
from partlens import checkpoints
from partlens import performer as P
from partlens.errors import CheckpointError, ConfigError, ContractError


def zero_bias_net(arch=None, seed=0, dtype=torch.float64):
    net = P.new_performer(arch or P.PerformerArch(), seed=seed, dtype=dtype).to(dtype)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)):
                m.bias.zero_()
    return net


class TestArch:
    def test_tap_spatial(self):
        arch = P.PerformerArch(image_size=64, tap_layer=3)
        assert arch.tap_spatial == 8
        assert P.PerformerArch(image_size=64, tap_layer=4).tap_spatial == 8
        assert P.PerformerArch(image_size=32, tap_layer=3).tap_spatial == 4

    def test_too_small_tap_rejected(self):
        with pytest.raises(ConfigError):
            P.PerformerArch(image_size=16, tap_layer=3, channels=(8, 8, 8, 8), fc1=8, fc2=8)

    def test_fc_width_vs_classes(self):
        with pytest.raises(ConfigError):
            P.PerformerArch(fc2=2, classes=3)

    def test_round_trip_dict(self):
        arch = P.PerformerArch(tap_layer=4, channels=(8, 16, 16, 16))
        assert P.PerformerArch.from_dict(arch.to_dict()) == arch


class TestForward:
    def test_zero_image_zero_bias_all_zero(self):
        net = zero_bias_net()
        b = net(torch.zeros(1, 1, 64, 64, dtype=torch.float64))
        assert torch.all(b.x_tap == 0)
        assert torch.all(b.fc1_star == 0)
        assert torch.all(b.fc2_star == 0)

    def test_purity(self):
        net = P.new_performer(P.PerformerArch(), seed=1)
        net.eval()
        x = torch.rand(2, 1, 64, 64)
        a, b = net(x), net(x)
        assert torch.equal(a.x_tap, b.x_tap)
        assert torch.equal(a.logits, b.logits)

    def test_relu_postconditions(self):
        net = P.new_performer(P.PerformerArch(), seed=2)
        b = net(torch.rand(3, 1, 64, 64))
        assert torch.all(b.fc1_star >= 0)
        assert torch.all(b.fc2_star >= 0)
        assert torch.all(b.x_tap >= 0)

    def test_shape_mismatch_rejected(self):
        net = P.new_performer(P.PerformerArch(), seed=0)
        with pytest.raises(ContractError):
            net(torch.zeros(1, 1, 32, 32))
        with pytest.raises(ContractError):
            net(torch.zeros(1, 3, 64, 64))

    def test_tap_layer_override(self):
        net = P.new_performer(P.PerformerArch(), seed=0)
        x = torch.rand(1, 1, 64, 64)
        t1 = net(x, tap_layer=1).x_tap
        assert t1.shape == (1, 16, 32, 32)


class TestClassifyFromFc2:
    def test_path_consistency(self):
        net = P.new_performer(P.PerformerArch(), seed=3)
        b = net(torch.rand(4, 1, 64, 64))
        assert torch.allclose(net.classify_from_fc2(b.fc2_star), b.logits)

    def test_zero_vector_zero_bias(self):
        net = zero_bias_net()
        out = net.classify_from_fc2(torch.zeros(32, dtype=torch.float64))
        assert torch.all(out == 0)

    def test_scaling_keeps_argmax_with_zero_bias(self):
        net = zero_bias_net(seed=5)
        v = torch.rand(32, dtype=torch.float64)
        a = net.classify_from_fc2(v)
        b = net.classify_from_fc2(2 * v)
        assert int(a.argmax()) == int(b.argmax())
        assert torch.allclose(b, 2 * a)

    def test_length_mismatch_rejected(self):
        net = P.new_performer(P.PerformerArch(), seed=0)
        with pytest.raises(ContractError):
            net.classify_from_fc2(torch.zeros(31))


class TestGradientCheck:
    def test_classification_loss_grads_match_finite_differences(self):
        arch = P.PerformerArch(image_size=32, channels=(4, 6, 6, 6), fc1=8, fc2=6)
        net = P.new_performer(arch, seed=7, dtype=torch.float64)
        x = torch.rand(2, 1, 32, 32, dtype=torch.float64)
        y = torch.tensor([0, 1])

        def loss_value() -> float:
            with torch.no_grad():
                return float(
                    torch.nn.functional.cross_entropy(net(x).logits, y)
                )

        loss = torch.nn.functional.cross_entropy(net(x).logits, y)
        net.zero_grad()
        loss.backward()
        rng = np.random.default_rng(4)
        params = list(net.parameters())
        h = 1e-6
        checked = 0
        while checked < 12:
            p = params[int(rng.integers(len(params)))]
            idx = int(rng.integers(p.numel()))
            an = float(p.grad.flatten()[idx])
            with torch.no_grad():
                orig = float(p.flatten()[idx])
                p.view(-1)[idx] = orig + h
                f_plus = loss_value()
                p.view(-1)[idx] = orig - h
                f_minus = loss_value()
                p.view(-1)[idx] = orig
            fd = (f_plus - f_minus) / (2 * h)
            if abs(an) < 1e-12 and abs(fd) < 1e-8:
                checked += 1
                continue
            assert relative_error(an, fd) < 1e-4
            checked += 1


class TestTraining:
    def test_training_reaches_target_and_checkpoints(self, tiny_performer):
        ckpt, metrics = tiny_performer
        assert (ckpt / "manifest.json").exists()
        assert (ckpt / "params.bin").exists()
        assert 0.0 <= metrics["val_accuracy"] <= 1.0
        assert metrics["status"] in ("converged", "failed")

    def test_zero_epochs_equals_initialization(self, tiny_dataset, tmp_path):
        manifest_path, manifest = tiny_dataset
        ckpt, metrics = P.train_performer(
            manifest_path, tmp_path / "p0", seed=21, epochs=0
        )
        arrays, meta, _ = checkpoints.load_archive(ckpt)
        fresh = P.new_performer(P.PerformerArch.from_dict(meta["arch"]), seed=21)
        for k, v in fresh.state_arrays().items():
            assert np.array_equal(v, arrays[k]), k
        assert metrics["status"] == "failed"  # untrained nets do not converge

    def test_same_seed_identical_final_loss(self, tiny_dataset, tmp_path):
        manifest_path, _ = tiny_dataset
        _, m1 = P.train_performer(manifest_path, tmp_path / "a", seed=5, epochs=2)
        _, m2 = P.train_performer(manifest_path, tmp_path / "b", seed=5, epochs=2)
        assert m1["final_train_loss"] == m2["final_train_loss"]
        assert m1["val_accuracy"] == m2["val_accuracy"]

    def test_same_seed_identical_archive(self, tiny_dataset, tmp_path):
        manifest_path, _ = tiny_dataset
        a, _ = P.train_performer(manifest_path, tmp_path / "a", seed=6, epochs=1)
        b, _ = P.train_performer(manifest_path, tmp_path / "b", seed=6, epochs=1)
        assert (a / "params.bin").read_bytes() == (b / "params.bin").read_bytes()

    def test_single_category_trains_against_noise(self, tmp_path):
        from partlens import scenes

        out = tmp_path / "single"
        scenes.generate_dataset(out, seed=3, num_scenes=40, num_categories=1)
        ckpt, metrics = P.train_performer(
            out / "manifest.json", tmp_path / "ck", seed=3, epochs=2
        )
        _, meta = P.load_performer(ckpt)
        assert meta["arch"]["classes"] == 2
        assert meta["train_config"]["single_category"] is True


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = P.new_performer(P.PerformerArch(), seed=9)
        P.save_performer(net, tmp_path / "ck", seed=9, metrics={"val_accuracy": 1.0})
        loaded, meta = P.load_performer(tmp_path / "ck")
        for k, v in net.state_arrays().items():
            assert np.array_equal(v, loaded.state_arrays()[k]), k
        assert meta["seed"] == 9

    def test_wrong_kind_rejected(self, tmp_path):
        checkpoints.save_archive(tmp_path / "ck", "explainer", {"w": np.zeros(2)}, {})
        with pytest.raises(CheckpointError):
            P.load_performer(tmp_path / "ck")

    def test_tampered_arch_rejected(self, tmp_path):
        net = P.new_performer(P.PerformerArch(), seed=9)
        P.save_performer(net, tmp_path / "ck", seed=9, metrics={})
        mpath = tmp_path / "ck" / "manifest.json"
        mpath.write_text(mpath.read_text().replace('"tap_layer": 3', '"tap_layer": 4'))
        with pytest.raises(CheckpointError):
            P.load_performer(tmp_path / "ck")

    def test_corrupt_params_rejected(self, tmp_path):
        net = P.new_performer(P.PerformerArch(), seed=9)
        P.save_performer(net, tmp_path / "ck", seed=9, metrics={})
        ppath = tmp_path / "ck" / "params.bin"
        raw = bytearray(ppath.read_bytes())
        raw[100] ^= 0xFF
        ppath.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            P.load_performer(tmp_path / "ck")

    def test_digest_is_stable(self, tmp_path):
        net = P.new_performer(P.PerformerArch(), seed=9)
        P.save_performer(net, tmp_path / "ck", seed=9, metrics={})
        d1 = checkpoints.archive_digest(tmp_path / "ck")
        d2 = checkpoints.archive_digest(tmp_path / "ck")
        assert d1 == d2
