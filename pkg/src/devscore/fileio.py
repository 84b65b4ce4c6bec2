"""On-disk formats: JSONL bag sets, binary checkpoints, PGM images, CSV.

Bags round-trip bit-exactly: floats are written as their shortest
round-trip decimal (json's default repr), masks as 8-bit PGM files next to
the JSONL.  Checkpoints are a one-line JSON header followed by the raw
little-endian float64 parameter blocks in a fixed order.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from .bags import Bag, Geometry
from .errors import ParseError
from .network import NetworkParams
from .prior import PriorConfig

Array = np.ndarray

CHECKPOINT_VERSION = 1


# ---- PGM ---------------------------------------------------------------------


def write_pgm(path, image: Array, maxval: int = 255) -> None:
    """Binary PGM (P5); 16-bit data goes out big-endian per the format."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ParseError(f"PGM wants a 2-d array, got shape {img.shape}")
    if maxval not in (255, 65535):
        raise ParseError(f"maxval must be 255 or 65535, got {maxval}")
    dtype = ">u2" if maxval == 65535 else np.uint8
    data = img.astype(dtype)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> Array:
    """Read a binary PGM written by `write_pgm` (or any plain P5 file)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ParseError(f"{path}: not a binary PGM (byte offset 0)")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated header (byte offset {pos})")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise ParseError(f"{path}: bad header fields {fields}") from None
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = width * height * dtype.itemsize
    body = raw[pos:pos + need]
    if len(body) < need:
        raise ParseError(f"{path}: expected {need} pixel bytes, got {len(body)} "
                         f"(byte offset {pos + len(body)})")
    return np.frombuffer(body, dtype=dtype).reshape(height, width)


def export_saliency_pgm(path, values: Array) -> None:
    """Min-max scale a saliency map into the full 16-bit range and write it."""
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    scaled = np.zeros_like(v) if span == 0 else (v - v.min()) / span
    write_pgm(path, np.round(scaled * 65535).astype(">u2"), maxval=65535)


# ---- JSONL bags ----------------------------------------------------------------


def save_bags(bags: list[Bag], path, mask_dir: str = "masks") -> None:
    """One JSON object per line; masks become PGM files under `mask_dir`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for bag in bags:
            rec = {
                "id": bag.id,
                "y": bag.y,
                "class_id": bag.class_id,
                "instances": [list(row) for row in bag.instances],
            }
            if bag.geometry is not None:
                rec["geometry"] = dataclasses.asdict(bag.geometry)
            if bag.mask is not None:
                rel = os.path.join(mask_dir, f"{bag.id}.pgm")
                full = path.parent / rel
                full.parent.mkdir(parents=True, exist_ok=True)
                write_pgm(full, (bag.mask.astype(np.uint8)) * 255, maxval=255)
                rec["mask_path"] = rel
            fh.write(json.dumps(rec) + "\n")


def load_bags(path) -> list[Bag]:
    """Inverse of `save_bags`; errors carry the line and byte offset."""
    path = Path(path)
    bags: list[Bag] = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.decode("utf-8").strip()
            if line:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as err:
                    raise ParseError(f"{path}: line {lineno} is not valid JSON "
                                     f"(byte offset {offset + err.pos})") from None
                bags.append(_bag_from_record(rec, path, lineno, offset))
            offset += len(raw)
    return bags


def _bag_from_record(rec: dict, path, lineno: int, offset: int) -> Bag:
    try:
        instances = np.array(rec["instances"], dtype=np.float64)
        if instances.ndim != 2:
            raise ValueError("instance rows have uneven lengths")
        geometry = Geometry(**rec["geometry"]) if rec.get("geometry") else None
        mask = None
        if rec.get("mask_path"):
            mask = (read_pgm(Path(path).parent / rec["mask_path"]) > 0).astype(np.uint8)
        return Bag(id=rec["id"], instances=instances, y=int(rec["y"]),
                   class_id=rec.get("class_id"), geometry=geometry, mask=mask)
    except (KeyError, TypeError, ValueError) as err:
        raise ParseError(f"{path}: line {lineno} (byte offset {offset}): {err}") from None


# ---- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, params: NetworkParams, k_fraction: float,
                    prior: PriorConfig, seed: int) -> None:
    """JSON header line, then each parameter block row-major little-endian."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": list(params.arch),
        "seed": seed,
        "k_fraction": k_fraction,
        "prior": {"mu": prior.mu, "sigma": prior.sigma, "n_draws": prior.n_draws},
        "blocks": [{"name": n, "shape": list(params.arrays[n].shape)}
                   for n in params.names],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for name in params.names:
            fh.write(np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    """Returns the parameters and the raw header metadata."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError(f"{path}: missing header line (byte offset 0)")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ParseError(f"{path}: bad header: {err} (byte offset 0)") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: format version {header.get('format_version')!r} "
                         f"not supported (expected {CHECKPOINT_VERSION})")
    pos = nl + 1
    arrays: dict[str, Array] = {}
    for block in header["blocks"]:
        shape = tuple(block["shape"])
        count = int(np.prod(shape)) if shape else 1
        need = count * 8
        if pos + need > len(raw):
            raise ParseError(f"{path}: block {block['name']!r} truncated "
                             f"(byte offset {len(raw)}, needed {pos + need})")
        arrays[block["name"]] = np.frombuffer(raw[pos:pos + need], dtype="<f8").reshape(shape).copy()
        pos += need
    if pos != len(raw):
        raise ParseError(f"{path}: {len(raw) - pos} trailing bytes (byte offset {pos})")
    params = NetworkParams(arch=tuple(header["arch"]), arrays=arrays)
    return params, header


def prior_from_header(header: dict) -> PriorConfig:
    p = header["prior"]
    return PriorConfig(mu=p["mu"], sigma=p["sigma"], n_draws=p["n_draws"])


# ---- CSV helpers ---------------------------------------------------------------


def save_history_csv(path, losses, epoch_auc=()) -> None:
    """iteration,loss plus a trailing auc column when per-epoch AUC exists."""
    epoch_auc = list(epoch_auc)
    with open(path, "w", encoding="utf-8") as fh:
        if epoch_auc:
            iters_per_epoch = len(losses) // max(len(epoch_auc), 1)
            fh.write("iteration,loss,auc\n")
            for i, loss in enumerate(losses):
                epoch_end = (i + 1) % iters_per_epoch == 0 if iters_per_epoch else False
                auc = epoch_auc[(i + 1) // iters_per_epoch - 1] if epoch_end else ""
                fh.write(f"{i},{loss!r},{auc if auc == '' else repr(auc)}\n")
        else:
            fh.write("iteration,loss\n")
            for i, loss in enumerate(losses):
                fh.write(f"{i},{loss!r}\n")


def load_history_csv(path) -> tuple[list[float], list[float]]:
    losses: list[float] = []
    aucs: list[float] = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["iteration", "loss"]:
            raise ParseError(f"{path}: unexpected header {header}")
        for line in fh:
            parts = line.strip().split(",")
            losses.append(float(parts[1]))
            if len(parts) > 2 and parts[2]:
                aucs.append(float(parts[2]))
    return losses, aucs
