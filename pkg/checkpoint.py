"""
Self-describing adaptor checkpoints.

File layout:
    8 bytes   magic b"MACCAPCK"
    4 bytes   container version (little-endian uint32)
    8 bytes   header length H (little-endian uint64)
    H bytes   UTF-8 JSON header
    payload   raw little-endian tensor bytes in header order

The header records the backbone and language model spec hashes, the noise
configuration, the adaptor shape and seed, every tensor's name, dtype, shape
and byte range, and the SHA-256 of the payload.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch

from adaptor import AdaptorDecoder
from utils.errors import CheckpointFormatException, IncompatibleCheckpointException
from utils.logging import get_logger

logger = get_logger("checkpoint")

MAGIC = b"MACCAPCK"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


@dataclass
class CheckpointHeader:
    format_version: int
    adaptor: Dict[str, Any]
    tensors: list
    payload_sha256: str
    backbone_spec_hash: Optional[str] = None
    lm_spec_hash: Optional[str] = None
    noise: Optional[Dict[str, Any]] = None
    extra: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def _spec_hash(spec) -> Optional[str]:
    if spec is None or isinstance(spec, str):
        return spec
    return spec.spec_hash()


def save_checkpoint(
    params: AdaptorDecoder,
    path: Union[str, Path],
    backbone_spec=None,
    lm_spec=None,
    noise=None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write params atomically; returns the path written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    tensors = []
    chunks = []
    offset = 0
    for name, tensor in params.state_dict().items():
        array = tensor.detach().cpu().contiguous().numpy()
        data = array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({
            "name": name,
            "dtype": str(array.dtype),
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)

    header = CheckpointHeader(
        format_version=FORMAT_VERSION,
        adaptor=dict(params.hparams),
        tensors=tensors,
        payload_sha256=hashlib.sha256(payload).hexdigest(),
        backbone_spec_hash=_spec_hash(backbone_spec),
        lm_spec_hash=_spec_hash(lm_spec),
        noise=noise.model_dump() if hasattr(noise, "model_dump") else noise,
        extra=extra,
    )
    header_bytes = json.dumps(header.to_dict(), sort_keys=True).encode("utf-8")

    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    os.replace(tmp_path, path)

    logger.info(f"Saved checkpoint {path} ({len(tensors)} tensors, {len(payload)} bytes)")
    return path


def _read(path: Path) -> Tuple[CheckpointHeader, bytes]:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointFormatException(str(path), "file not found")

    if len(raw) < _PREAMBLE.size:
        raise CheckpointFormatException(str(path), "file truncated before header")
    magic, version, header_len = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatException(str(path), "bad magic bytes")
    if version != FORMAT_VERSION:
        raise CheckpointFormatException(str(path), f"unsupported container version {version}")

    header_end = _PREAMBLE.size + header_len
    if header_end > len(raw):
        raise CheckpointFormatException(str(path), "file truncated inside header")
    try:
        header = CheckpointHeader(**json.loads(raw[_PREAMBLE.size:header_end].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as e:
        raise CheckpointFormatException(str(path), f"unreadable header: {e}")

    payload = raw[header_end:]
    expected = sum(t["nbytes"] for t in header.tensors)
    if len(payload) != expected:
        raise CheckpointFormatException(str(path), f"payload is {len(payload)} bytes, expected {expected}")
    if hashlib.sha256(payload).hexdigest() != header.payload_sha256:
        raise CheckpointFormatException(str(path), "payload checksum mismatch")
    return header, payload


def read_checkpoint_header(path: Union[str, Path]) -> CheckpointHeader:
    return _read(Path(path))[0]


def load_checkpoint(path: Union[str, Path], backbone_spec=None, lm_spec=None) -> AdaptorDecoder:
    """Rebuild the adaptor; spec hashes are checked when specs are supplied."""
    path = Path(path)
    header, payload = _read(path)

    for field, spec in (("backbone_spec_hash", backbone_spec), ("lm_spec_hash", lm_spec)):
        expected = _spec_hash(spec)
        found = getattr(header, field)
        if expected is not None and found is not None and expected != found:
            raise IncompatibleCheckpointException(field, expected, found)

    state = {}
    for entry in header.tensors:
        start = entry["offset"]
        array = np.frombuffer(payload[start:start + entry["nbytes"]], dtype=np.dtype(entry["dtype"]))
        state[entry["name"]] = torch.from_numpy(array.reshape(entry["shape"]).copy())

    hp = header.adaptor
    dtype = state["queries"].dtype if "queries" in state else torch.float64
    try:
        adaptor = AdaptorDecoder(
            dim=hp["dim"], lm_dim=hp["lm_dim"], n_q=hp["n_q"], n_heads=hp["n_heads"],
            ffn_mult=hp["ffn_mult"], seed=hp["seed"], dtype=dtype,
        )
    except (KeyError, TypeError) as e:
        raise CheckpointFormatException(str(path), f"adaptor hyperparameters incomplete ({e!r})")
    try:
        adaptor.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointFormatException(str(path), f"tensor set does not match adaptor: {e}")

    adaptor.provenance = header.to_dict()
    logger.debug(f"Loaded checkpoint {path} (N_q={hp['n_q']})")
    return adaptor
