import os

import pytest
import torch

from checkpoint import load_checkpoint
from training import build_adaptor
from utils.config import TrainConfig
from utils.resilience import CheckpointKeeper, RunLock, retry_io


class TestRunLock:
    def test_acquire_and_release(self, tmp_path):
        with RunLock(tmp_path) as lock:
            assert lock.lockfile_path.read_text() == str(os.getpid())
        assert not lock.lockfile_path.exists()

    def test_live_holder_blocks(self, tmp_path):
        (tmp_path / "maccap.lock").write_text(str(os.getppid()))
        with pytest.raises(OSError):
            with RunLock(tmp_path):
                pass
        assert (tmp_path / "maccap.lock").read_text() == str(os.getppid())

    @pytest.mark.parametrize("content", ["not a pid", "-5"])
    def test_stale_lock_is_replaced(self, tmp_path, content):
        (tmp_path / "maccap.lock").write_text(content)
        lock = RunLock(tmp_path)
        assert lock.acquire()
        lock.release()


class TestCheckpointKeeper:
    @pytest.fixture
    def adaptor(self, small_backbone, small_lm):
        return build_adaptor(TrainConfig(adaptor={"n_q": 2, "n_heads": 2}), small_backbone, small_lm)

    def test_restore_previous_state(self, adaptor):
        keeper = CheckpointKeeper()
        assert not keeper.restore(adaptor)
        keeper.remember(adaptor, step=4)
        before = {k: v.clone() for k, v in adaptor.state_dict().items()}
        with torch.no_grad():
            for p in adaptor.parameters():
                p.add_(1.0)
        assert keeper.restore(adaptor)
        for name, value in adaptor.state_dict().items():
            assert torch.equal(value, before[name])
        assert keeper.step == 4

    def test_dump_writes_last_good(self, adaptor, small_backbone, small_lm, tmp_path):
        keeper = CheckpointKeeper()
        assert keeper.dump(adaptor, tmp_path / "adaptor.ckpt", {}) is None
        keeper.remember(adaptor, step=0)
        header = {"backbone_spec": small_backbone.spec, "lm_spec": small_lm.spec}
        written = keeper.dump(adaptor, tmp_path / "adaptor.ckpt", header)
        assert written == tmp_path / "adaptor.ckpt.last_good"
        loaded = load_checkpoint(written, small_backbone.spec, small_lm.spec)
        for name, value in loaded.state_dict().items():
            assert torch.equal(value, adaptor.state_dict()[name])
        assert keeper.dump(adaptor, None, header) is None


def test_retry_io_retries_os_errors(monkeypatch):
    monkeypatch.setattr("time.sleep", lambda _: None)
    calls = []

    @retry_io
    def flaky():
        calls.append(1)
        if len(calls) < 3:
            raise OSError("mount busy")
        return "ok"

    assert flaky() == "ok"
    assert len(calls) == 3


def test_retry_io_gives_up(monkeypatch):
    monkeypatch.setattr("time.sleep", lambda _: None)

    @retry_io
    def broken():
        raise OSError("gone")

    with pytest.raises(OSError):
        broken()
