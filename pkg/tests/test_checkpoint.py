import json
import struct

import pytest
import torch

from adaptor import AdaptorDecoder
from backbone import BackboneSpec
from checkpoint import MAGIC, load_checkpoint, read_checkpoint_header, save_checkpoint
from langmodel import LanguageModelSpec
from utils.config import NoiseConfig
from utils.errors import CheckpointFormatException, IncompatibleCheckpointException

BACKBONE_SPEC = BackboneSpec(dim=8, vision_dim=8, n_patches=6, vocab_size=256, max_text_len=32)
LM_SPEC = LanguageModelSpec(embed_dim=6, vocab_size=256, max_gen_len=8, bos_id=1, eos_id=2)


def _rewrite_header(path, edit):
    """Re-encode the JSON header after edit(header); the payload is left as is."""
    raw = path.read_bytes()
    preamble = struct.Struct("<8sIQ")
    magic, version, header_len = preamble.unpack_from(raw)
    header = json.loads(raw[preamble.size:preamble.size + header_len])
    edit(header)
    encoded = json.dumps(header).encode("utf-8")
    path.write_bytes(preamble.pack(magic, version, len(encoded)) + encoded + raw[preamble.size + header_len:])


@pytest.fixture
def adaptor():
    return AdaptorDecoder(dim=8, lm_dim=6, n_q=3, n_heads=2, seed=4)


@pytest.fixture
def saved(adaptor, tmp_path):
    return save_checkpoint(adaptor, tmp_path / "adaptor.ckpt", BACKBONE_SPEC, LM_SPEC,
                           NoiseConfig(sigma=0.02, n_cr=5), {"train_seed": 1})


class TestSaveLoad:
    def test_restores_identical_tensors(self, adaptor, saved):
        loaded = load_checkpoint(saved, BACKBONE_SPEC, LM_SPEC)
        for name, tensor in adaptor.state_dict().items():
            assert torch.equal(loaded.state_dict()[name], tensor), name
        rows = torch.randn((4, 8), dtype=torch.float64)
        with torch.no_grad():
            assert torch.equal(loaded(rows), adaptor(rows))

    def test_header_records_provenance(self, saved):
        header = read_checkpoint_header(saved)
        assert header.backbone_spec_hash == BACKBONE_SPEC.spec_hash()
        assert header.lm_spec_hash == LM_SPEC.spec_hash()
        assert header.noise["sigma"] == 0.02 and header.noise["n_cr"] == 5
        assert header.adaptor["n_q"] == 3
        assert header.extra == {"train_seed": 1}

    def test_provenance_attached(self, saved):
        assert load_checkpoint(saved).provenance["noise"]["n_cr"] == 5

    def test_starts_with_magic(self, saved):
        assert saved.read_bytes()[:8] == MAGIC

    def test_no_temporary_file_left(self, saved):
        assert not saved.with_name(saved.name + ".tmp").exists()


class TestRejection:
    def test_backbone_mismatch(self, saved):
        other = BackboneSpec(dim=8, vision_dim=8, n_patches=7, vocab_size=256, max_text_len=32)
        with pytest.raises(IncompatibleCheckpointException):
            load_checkpoint(saved, other, LM_SPEC)

    def test_lm_mismatch(self, saved):
        other = LanguageModelSpec(embed_dim=6, vocab_size=256, max_gen_len=9, bos_id=1, eos_id=2)
        with pytest.raises(IncompatibleCheckpointException):
            load_checkpoint(saved, BACKBONE_SPEC, other)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointFormatException):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_truncated(self, saved):
        data = saved.read_bytes()
        saved.write_bytes(data[:-10])
        with pytest.raises(CheckpointFormatException):
            load_checkpoint(saved)

    def test_truncated_preamble(self, saved):
        saved.write_bytes(saved.read_bytes()[:5])
        with pytest.raises(CheckpointFormatException):
            load_checkpoint(saved)

    def test_bad_magic(self, saved):
        data = bytearray(saved.read_bytes())
        data[0:8] = b"NOTACKPT"
        saved.write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatException):
            load_checkpoint(saved)

    def test_flipped_payload_byte(self, saved):
        data = bytearray(saved.read_bytes())
        data[-1] ^= 0xFF
        saved.write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatException):
            load_checkpoint(saved)

    @pytest.mark.parametrize("key", ["n_heads", "dim", "seed"])
    def test_missing_adaptor_hyperparameter(self, saved, key):
        _rewrite_header(saved, lambda header: header["adaptor"].pop(key))
        with pytest.raises(CheckpointFormatException, match="adaptor hyperparameters"):
            load_checkpoint(saved)

    def test_missing_adaptor_section(self, saved):
        _rewrite_header(saved, lambda header: header.update(adaptor=None))
        with pytest.raises(CheckpointFormatException):
            load_checkpoint(saved)

    def test_rewritten_header_still_loads(self, adaptor, saved):
        _rewrite_header(saved, lambda header: header["extra"].update(note="kept"))
        loaded = load_checkpoint(saved)
        assert torch.equal(loaded.state_dict()["queries"], adaptor.state_dict()["queries"])
