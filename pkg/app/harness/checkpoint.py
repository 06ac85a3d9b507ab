"""
Checkpoint Module

Binary checkpoint of a training run at a batch boundary:

    header   magic, format version, V, F, trailer length, layout hash
    body     theta as little-endian float64
    trailer  JSON: step counters, curriculum state, rng state, config fingerprint
    digest   sha256 of everything above

Files are written to a temporary name and renamed into place, so a crash
never leaves a partial checkpoint under the final name.
"""

import hashlib
import json
import logging
import os
import re
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from app.shared.curriculum import CurriculumState
from app.shared.errors import CheckpointError
from app.shared.policy import FeatureLayout, PolicyParams

logger = logging.getLogger(__name__)

MAGIC = b"ADCLCKPT"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sIIIQ64s")
DIGEST_SIZE = 32
CHECKPOINT_DIR = "checkpoints"
CHECKPOINT_NAME = re.compile(r"^batch-(\d+)\.ckpt$")


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: PolicyParams
    step: int
    data_step: int
    curriculum: CurriculumState
    # every random stream is keyed by (seed, labels), so seed and data_step
    # are the whole random state of a run
    rng_state: Optional[dict] = None
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, checkpoint):
    """
    Write a checkpoint atomically.

    Args:
        path (str): Destination file
        checkpoint (Checkpoint): What to store

    Returns:
        str: The path written
    """
    params = checkpoint.params
    layout = params.layout
    trailer = json.dumps(
        {
            "step": checkpoint.step,
            "data_step": checkpoint.data_step,
            "version": params.version,
            "curriculum": checkpoint.curriculum.to_dict(),
            "rng_state": checkpoint.rng_state,
            "config_fingerprint": checkpoint.config_fingerprint,
            "layout": layout.describe(),
            "extra": checkpoint.extra,
        },
        sort_keys=True,
    ).encode("utf-8")
    header = HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        layout.vocab_size,
        layout.feature_dim,
        len(trailer),
        layout.hash.encode("ascii"),
    )
    body = header + params.theta.astype("<f8").tobytes() + trailer
    payload = body + hashlib.sha256(body).digest()

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(payload)
    os.replace(tmp_path, path)
    logger.debug(f"Saved checkpoint at step {checkpoint.step} to {path}")
    return path


def load_checkpoint(path, layout=None, config_fingerprint=None):
    """
    Read and verify a checkpoint.

    Args:
        path (str): Checkpoint file
        layout (FeatureLayout, optional): Expected layout; its hash must match
        config_fingerprint (str, optional): Expected configuration fingerprint

    Returns:
        Checkpoint: The stored state

    Raises:
        CheckpointError: Corrupt, truncated, version or layout mismatch
    """
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None

    if len(payload) < HEADER.size + DIGEST_SIZE:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = payload[:-DIGEST_SIZE], payload[-DIGEST_SIZE:]
    magic, version, vocab_size, feature_dim, trailer_len, layout_hash = HEADER.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}"
        )
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")

    n_params = vocab_size * feature_dim
    theta_end = HEADER.size + 8 * n_params
    if len(body) != theta_end + trailer_len:
        raise CheckpointError(f"{path}: size does not match its header")
    layout_hash = layout_hash.decode("ascii")
    if layout is not None and layout.hash != layout_hash:
        raise CheckpointError(f"{path}: feature layout hash mismatch")

    try:
        meta = json.loads(body[theta_end:].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path}: unreadable trailer: {e}") from None
    if config_fingerprint is not None and meta["config_fingerprint"] != config_fingerprint:
        raise CheckpointError(f"{path}: written by a different configuration")

    if layout is None:
        described = meta["layout"]
        layout = FeatureLayout(
            blocks=tuple(name for name, _ in described["blocks"]),
            position_cap=described["position_cap"],
            vocab_size=described["vocab_size"],
            version=described["version"],
        )
        if layout.hash != layout_hash:
            raise CheckpointError(f"{path}: feature layout hash mismatch")

    theta = np.frombuffer(body, dtype="<f8", count=n_params, offset=HEADER.size)
    return Checkpoint(
        params=PolicyParams(theta.astype(np.float64), layout, meta["version"]),
        step=meta["step"],
        data_step=meta["data_step"],
        curriculum=CurriculumState.from_dict(meta["curriculum"]),
        rng_state=meta["rng_state"],
        config_fingerprint=meta["config_fingerprint"],
        extra=meta["extra"],
    )


def checkpoint_path(run_dir, batch_index):
    return os.path.join(run_dir, CHECKPOINT_DIR, f"batch-{batch_index:02d}.ckpt")


def list_checkpoints(run_dir):
    """Checkpoint files of a run, in batch order."""
    directory = os.path.join(run_dir, CHECKPOINT_DIR)
    if not os.path.isdir(directory):
        return []
    found = []
    for name in os.listdir(directory):
        match = CHECKPOINT_NAME.match(name)
        if match:
            found.append((int(match.group(1)), os.path.join(directory, name)))
    return [path for _, path in sorted(found)]


def latest_checkpoint(run_dir):
    checkpoints = list_checkpoints(run_dir)
    return checkpoints[-1] if checkpoints else None
