import json
import zipfile

import numpy as np
import pytest
import torch

from airm.errors import CheckpointError, NumericalError, ParameterError
from airm.trainer import (LOG_HEADER, Checkpoint, TrainConfig, build_model, load_checkpoint,
                          lr_at, model_state, paper_profile, save_checkpoint, train)
import airm.trainer as trainer_mod


def tiny(**kw):
    base = dict(total_iters=4, decay_iters=(2,), batch_size=1, n_scenes=2, scene_size=(32, 32),
                crop=(32, 32), aee_dims=(8, 16), feat_dim=8, hidden=16, n_layers=3,
                hyper_width=8, max_pairs=256, R=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_ckpt():
    return train(tiny())


class TestSchedule:
    def test_desk_start(self):
        assert lr_at(0, TrainConfig()) == 1e-3

    def test_full_scale_decays(self):
        cfg = paper_profile()
        assert lr_at(0, cfg) == 2.25e-5
        assert lr_at(22499, cfg) == 2.25e-5
        assert lr_at(22500, cfg) == pytest.approx(2.25e-6, rel=1e-12)
        assert lr_at(37500, cfg) == pytest.approx(2.25e-7, rel=1e-12)
        assert cfg.total_iters == 45000 and cfg.R == 14 and cfg.crop == (224, 224)

    def test_decays_validated(self):
        with pytest.raises(ParameterError):
            TrainConfig(decay_iters=(10, 5))
        with pytest.raises(ParameterError):
            TrainConfig(total_iters=100, decay_iters=(100,))


class TestConfigText:
    def test_roundtrip(self):
        cfg = tiny(seed=3, categories=("disk", "ring"))
        assert TrainConfig.from_text(cfg.to_text()) == cfg

    def test_partial_overrides_defaults(self):
        cfg = TrainConfig.from_text("lr = 0.01\ncrop = 32x32  # comment\n")
        assert cfg.lr == 0.01 and cfg.crop == (32, 32) and cfg.total_iters == 2000

    def test_unknown_key(self):
        with pytest.raises(ParameterError):
            TrainConfig.from_text("learning_rate = 1")

    def test_full_scale_profile_by_name(self):
        assert TrainConfig.from_text("profile = paper").lr == 2.25e-5

    def test_digest_tracks_content(self):
        assert tiny().digest() == tiny().digest() != tiny(seed=1).digest()


class TestCheckpoint:
    def test_zero_iterations_returns_initialisation(self):
        cfg = tiny(total_iters=0, decay_iters=())
        ckpt = train(cfg)
        init = model_state(build_model(cfg))
        assert ckpt.iteration == 0
        for k, v in init.items():
            assert np.array_equal(ckpt.params[k], v)

    def test_roundtrip_preserves_values_and_outputs(self, tiny_ckpt, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(tiny_ckpt, p)
        back = load_checkpoint(p)
        assert back.config == tiny_ckpt.config and back.iteration == tiny_ckpt.iteration
        for k, v in tiny_ckpt.params.items():
            assert back.params[k].shape == v.shape and np.array_equal(back.params[k], v)
        x = torch.rand(1, 4, 32, 32)
        with torch.no_grad():
            a = tiny_ckpt.build_model()(x)["mask"]
            b = back.build_model()(x)["mask"]
        assert torch.equal(a, b)

    def test_float_arrays_are_32_bit(self, tiny_ckpt):
        assert all(v.dtype in (np.float32, np.int64) for v in tiny_ckpt.params.values())

    def test_saving_twice_is_byte_identical(self, tiny_ckpt, tmp_path):
        save_checkpoint(tiny_ckpt, tmp_path / "a")
        save_checkpoint(tiny_ckpt, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def _rewrite_manifest(self, src, dst, edit):
        with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
            for item in zin.infolist():
                data = zin.read(item)
                if item.filename == "manifest.json":
                    m = json.loads(data)
                    edit(m)
                    data = json.dumps(m).encode()
                zout.writestr(item, data)

    def test_edited_shape_manifest(self, tiny_ckpt, tmp_path):
        save_checkpoint(tiny_ckpt, tmp_path / "ok")

        def edit(m):
            name = sorted(m["shapes"])[0]
            m["shapes"][name][0] = [999]
        self._rewrite_manifest(tmp_path / "ok", tmp_path / "bad", edit)
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(tmp_path / "bad")

    def test_version_mismatch(self, tiny_ckpt, tmp_path):
        save_checkpoint(tiny_ckpt, tmp_path / "ok")
        self._rewrite_manifest(tmp_path / "ok", tmp_path / "old", lambda m: m.update(version=0))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "old")

    def test_corrupt_file(self, tmp_path):
        (tmp_path / "junk").write_bytes(b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "junk")

    def test_params_must_fit_model(self, tiny_ckpt):
        params = dict(tiny_ckpt.params)
        name = next(k for k, v in params.items() if v.ndim == 2)
        params[name] = np.zeros((3, 3), np.float32)
        with pytest.raises(CheckpointError):
            Checkpoint(params, 1, tiny_ckpt.config).build_model()


class TestTraining:
    def test_deterministic(self, tiny_ckpt, tmp_path):
        again = train(tiny())
        assert [r[1:4] for r in again.history] == [r[1:4] for r in tiny_ckpt.history]
        save_checkpoint(tiny_ckpt, tmp_path / "a")
        save_checkpoint(again, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_log_file(self, tmp_path):
        log = tmp_path / "log.csv"
        train(tiny(total_iters=3, decay_iters=()), log_path=log)
        rows = log.read_text().splitlines()
        assert rows[0] == ",".join(LOG_HEADER) and len(rows) == 4
        assert [int(r.split(",")[0]) for r in rows[1:]] == [0, 1, 2]

    def test_lr_logged_per_iteration(self, tiny_ckpt):
        assert [r[4] for r in tiny_ckpt.history] == [1e-3, 1e-3, 1e-4, 1e-4]

    def test_nan_loss_aborts_with_dump(self, tmp_path, monkeypatch):
        real = trainer_mod.compute_losses

        def poisoned(*a, **kw):
            losses, out = real(*a, **kw)
            losses["total"] = losses["total"] * float("nan")
            return losses, out
        monkeypatch.setattr(trainer_mod, "compute_losses", poisoned)
        with pytest.raises(NumericalError) as exc:
            train(tiny(), dump_dir=tmp_path)
        dump = json.loads((tmp_path / "nan_dump.json").read_text())
        assert dump["iteration"] == exc.value.iteration == 0
        assert dump["batch_seed"] == exc.value.batch_seed

    def test_every_parameter_receives_gradient(self):
        seen = {}

        def watch(it, model, losses):
            for name, p in model.named_parameters():
                if p.grad is not None and p.grad.abs().max() > 0:
                    seen[name] = True
        cfg = tiny(total_iters=100, decay_iters=(), batch_size=2)
        train(cfg, callback=watch)
        names = {n for n, _ in build_model(cfg).named_parameters()}
        assert names - set(seen) == set()

    def test_overfit_single_scene_float64(self):
        cfg = tiny(total_iters=500, decay_iters=(), n_scenes=1, dtype="float64", lr=2e-3,
                   hidden=32, feat_dim=16, aee_dims=(16, 16))
        h = np.array(train(cfg).history)
        first, last = h[0, 2], h[-1, 2]
        assert last < 0.1 * first
        windows = h[:, 2].reshape(10, 50).mean(axis=1)
        assert windows[-1] < windows[0]
        assert np.all(np.diff(windows) < 0.05 * windows[0])
