import math
from dataclasses import replace

import pytest
import torch

from aaae import trainer as T
from aaae.data import DatasetSpec, Dataset, load_dataset
from aaae.errors import CheckpointError, ConfigurationError, NumericalError
from aaae.model import image_spec, state_digest
from aaae.objectives import Hyperparams, reconstruction_cost

from conftest import fake_mnist, tiny_image_spec

SMALL = T.TrainConfig(batch_size=20, epochs=2, seed=3, validation_fraction=0.0)


@pytest.fixture(scope="module")
def digits(tmp_path_factory):
    root = fake_mnist(tmp_path_factory.mktemp("d") / "mnist", n_train=100, n_test=20)
    return load_dataset(DatasetSpec(path=str(root)))


def digests(model, roles):
    return {r: state_digest(model.group(r)) for r in roles}


def test_config_validation():
    with pytest.raises(ConfigurationError):
        T.TrainConfig(k=0)
    for bad in (dict(learning_rate=-1.0), dict(adam_beta2=1.0), dict(batch_size=0),
                dict(validation_fraction=1.0), dict(early_stop_patience=-1)):
        with pytest.raises(ConfigurationError):
            T.TrainConfig(**bad)
    d = T.TrainConfig().to_dict()
    assert (d["learning_rate"], d["adam_beta1"], d["adam_beta2"]) == (1e-4, 0.5, 0.999)
    assert (d["batch_size"], d["epochs"], d["k"]) == (100, 200, 2)
    assert T.TrainConfig.from_dict(d) == T.TrainConfig()


def test_outer_step_is_deterministic(digits):
    spec = tiny_image_spec()
    batch = digits.data[:20]
    states = [T.init_state(SMALL, spec) for _ in range(2)]
    reports = [T.train_outer_step(batch, s, 0) for s in states]
    assert reports[0] == reports[1]
    assert state_digest(states[0].model) == state_digest(states[1].model)


def test_zero_learning_rate_leaves_parameters(digits):
    cfg = replace(SMALL, learning_rate=0.0)
    state = T.init_state(cfg, tiny_image_spec())
    params = {n: p.detach().clone() for n, p in state.model.named_parameters()}
    report = T.train_step(digits.data[:20], state, digits, 0)
    assert report.is_finite() and report.reconstruction > 0
    for n, p in state.model.named_parameters():
        assert torch.equal(p, params[n]), n


def test_update_scope_isolation(digits):
    state = T.init_state(SMALL, tiny_image_spec())
    before = digests(state.model, ("phi", "gamma"))
    T.train_outer_step(digits.data[:20], state, 0)
    assert digests(state.model, ("phi", "gamma")) == before
    before = digests(state.model, ("theta", "psi", "omega"))
    T.train_inner_loop(state, digits, 0)
    assert digests(state.model, ("theta", "psi", "omega")) == before
    assert state.update_counts == {"autoencoder": 1, "image_disc": 1, "critic": 2, "approximator": 2}


def test_update_order_and_loop_arithmetic():
    data = torch.rand(500, 3, 32, 32) * 2 - 1
    cfg = T.TrainConfig(batch_size=100, epochs=1, seed=0, validation_fraction=0.0)
    result = T.train(cfg, Dataset(data), tiny_image_spec(), record_events=True)
    state = result.last
    assert state.global_step == 5
    assert state.update_counts == {"autoencoder": 5, "image_disc": 5, "critic": 10, "approximator": 10}
    per_step = [what for step, what in state.events if step == 0]
    assert per_step == ["autoencoder", "image_disc", "critic", "approximator", "critic", "approximator"]


def test_non_finite_loss_aborts_without_update(digits):
    state = T.init_state(SMALL, tiny_image_spec())
    before = state_digest(state.model)
    batch = digits.data[:20].clone()
    batch[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalError) as info:
        T.train_outer_step(batch, state, 7)
    assert info.value.batch_index == 7
    assert state_digest(state.model) == before
    assert state.update_counts["autoencoder"] == 0


def test_non_finite_streak_aborts_training():
    data = torch.full((80, 3, 32, 32), float("nan"))
    with pytest.raises(T.TrainingAborted):
        T.train(replace(SMALL, epochs=1), Dataset(data), tiny_image_spec())


def test_empty_dataset_rejected():
    with pytest.raises(ConfigurationError):
        T.train(SMALL, Dataset(torch.zeros(0, 3, 32, 32)), tiny_image_spec())


def test_descent_with_frozen_discriminator(digits):
    hp = Hyperparams(lambda1=1e3, lambda1_weights="reconstruction")
    cfg = T.TrainConfig(hyperparams=hp, seed=0)
    spec = image_spec(32, 3, code_dim=16, noise_dim=4, base_width=16, max_width=128, latent_width=16)
    state = T.init_state(cfg, spec)
    for group in state.optimizers["image_disc"].param_groups:
        group["lr"] = 0.0
    omega = state_digest(state.model.image_disc)
    batch = digits.data[:100]
    first = T.train_outer_step(batch, state, 0).reconstruction
    for i in range(199):
        last = T.train_outer_step(batch, state, i + 1).reconstruction
    assert state_digest(state.model.image_disc) == omega
    assert last <= 0.5 * first


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, digits):
    spec = tiny_image_spec()
    state = T.init_state(SMALL, spec)
    T.train_step(digits.data[:20], state, digits, 0)
    path = T.save_checkpoint(state, tmp_path / "a.ckpt")
    loaded = T.load_checkpoint(path, SMALL, spec)
    assert state_digest(loaded.model) == state_digest(state.model)
    assert torch.equal(loaded.generator.get_state(), state.generator.get_state())
    for name, opt in state.optimizers.items():
        a, b = opt.state_dict(), loaded.optimizers[name].state_dict()
        for idx, st in a["state"].items():
            for key, v in st.items():
                assert torch.equal(v, b["state"][idx][key]), (name, idx, key)
    assert loaded.global_step == state.global_step and loaded.update_counts == state.update_counts
    T.save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert state_digest(T.load_model(path)) == state_digest(state.model)


def test_checkpoint_integrity_errors(tmp_path):
    spec = tiny_image_spec()
    state = T.init_state(SMALL, spec)
    blob = T.checkpoint_bytes(state)
    for name, bad in (("trunc", blob[: len(blob) // 2]), ("magic", b"XXXXXXXX" + blob[8:]),
                      ("flip", blob[:-1] + bytes([blob[-1] ^ 1])), ("tiny", blob[:5])):
        (tmp_path / name).write_bytes(bad)
        with pytest.raises(CheckpointError):
            T.load_checkpoint(tmp_path / name)
    (tmp_path / "ok").write_bytes(blob)
    with pytest.raises(CheckpointError):
        T.load_checkpoint(tmp_path / "ok", SMALL, tiny_image_spec(code_dim=16))
    with pytest.raises(CheckpointError):
        T.load_checkpoint(tmp_path / "ok", replace(SMALL, k=3), spec)
    with pytest.raises(CheckpointError):
        T.load_checkpoint(tmp_path / "missing")


def test_history_csv_and_early_stopping(tmp_path, digits):
    cfg = T.TrainConfig(batch_size=25, epochs=6, seed=1, validation_fraction=0.2, early_stop_patience=2)
    result = T.train(cfg, digits, tiny_image_spec(), out_dir=tmp_path)
    rows = T.read_history_csv(tmp_path / "history.csv")
    assert list(rows[0])[:8] == ["epoch", "step", "recon", "image_adv", "image_disc", "critic", "gp", "approx"]
    assert rows == result.history
    best = result.best
    later = [r["val_recon"] for r in rows if r["epoch"] > best.best_epoch]
    assert all(best.best_val <= v for v in later)
    assert best.best_val == min(r["val_recon"] for r in rows)
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    if result.stopped_early:
        assert len(rows) - best.best_epoch >= 2


def test_resume_matches_uninterrupted(tmp_path, digits):
    spec = tiny_image_spec()
    full = T.TrainConfig(batch_size=25, epochs=3, seed=2, validation_fraction=0.2, early_stop_patience=0)
    T.train(full, digits, spec, out_dir=tmp_path / "full")
    T.train(replace(full, epochs=1), digits, spec, out_dir=tmp_path / "part")
    T.train(full, digits, spec, out_dir=tmp_path / "part", resume=tmp_path / "part" / "last.ckpt")
    a = (tmp_path / "full" / "history.csv").read_bytes()
    b = (tmp_path / "part" / "history.csv").read_bytes()
    assert a == b
    assert (tmp_path / "full" / "last.ckpt").read_bytes() == (tmp_path / "part" / "last.ckpt").read_bytes()


def test_validation_loss_uses_running_statistics(digits):
    state = T.init_state(SMALL, tiny_image_spec())
    v = T.validation_loss(state.model, digits.data[:10])
    assert math.isfinite(v) and v == pytest.approx(
        float(reconstruction_cost(digits.data[:10], T.reconstruct(state.model, digits.data[:10]))))
    assert state.model.training
