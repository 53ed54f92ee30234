"""Binary tensor and named-parameter formats.

Tensor blob ("HVT1"): magic, u32 rank, rank x u32 dims, little-endian f32
payload. Weight file ("HVW1"): magic, u32 entry count, then per entry a u16
name length, the UTF-8 name, and an HVT1 blob. Entry order is preserved, so
a round-trip reproduces the file byte for byte.
"""

import struct

import numpy as np

TENSOR_MAGIC = b"HVT1"
WEIGHTS_MAGIC = b"HVW1"


class FormatError(ValueError):
    """Malformed HVT1/HVW1 data."""


def tensor_to_bytes(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    parts = [TENSOR_MAGIC, struct.pack("<I", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def tensor_from_bytes(buf, offset=0, context="tensor"):
    """Parse one HVT1 blob; returns (array, next_offset)."""
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise FormatError(f"{context}: bad tensor magic")
    offset += 4
    if offset + 4 > len(buf):
        raise FormatError(f"{context}: truncated rank")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if rank > 8:
        raise FormatError(f"{context}: implausible rank {rank}")
    if offset + 4 * rank > len(buf):
        raise FormatError(f"{context}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    nbytes = 4 * count
    if offset + nbytes > len(buf):
        raise FormatError(f"{context}: truncated payload ({count} elements expected)")
    arr = np.frombuffer(buf[offset : offset + nbytes], dtype="<f4").reshape(dims)
    return arr.astype(np.float32), offset + nbytes


def write_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def read_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf, 0, context=str(path))
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


class WeightMap:
    """Ordered name -> float32 array store; the unit of merging and checkpoints.

    Names are unique and iteration follows insertion order. The provenance
    tag (base | inp | ds | merged) is in-memory metadata only; it is not
    serialized.
    """

    def __init__(self, entries=None, provenance="base"):
        self.entries = {}
        self.provenance = provenance
        if entries:
            for name, arr in entries.items() if isinstance(entries, dict) else entries:
                self[name] = arr

    def __setitem__(self, name, arr):
        self.entries[str(name)] = np.ascontiguousarray(arr, dtype=np.float32)

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __len__(self):
        return len(self.entries)

    def names(self):
        return list(self.entries.keys())

    def items(self):
        return self.entries.items()

    def total_size(self):
        return sum(int(a.size) for a in self.entries.values())

    def allclose(self, other, atol=0.0):
        if self.names() != other.names():
            return False
        return all(np.allclose(self[n], other[n], atol=atol, rtol=0.0) for n in self.names())

    def to_bytes(self):
        parts = [WEIGHTS_MAGIC, struct.pack("<I", len(self.entries))]
        for name, arr in self.entries.items():
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise FormatError(f"entry name too long: {name[:40]}...")
            parts.append(struct.pack("<H", len(nb)))
            parts.append(nb)
            parts.append(tensor_to_bytes(arr))
        return b"".join(parts)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf, provenance="base"):
        if buf[:4] != WEIGHTS_MAGIC:
            raise FormatError("bad weight-file magic")
        (count,) = struct.unpack_from("<I", buf, 4)
        offset = 8
        wm = cls(provenance=provenance)
        for idx in range(count):
            if offset + 2 > len(buf):
                raise FormatError(f"truncated name length for entry {idx}")
            (nlen,) = struct.unpack_from("<H", buf, offset)
            offset += 2
            if offset + nlen > len(buf):
                raise FormatError(f"truncated name for entry {idx}")
            name = buf[offset : offset + nlen].decode("utf-8")
            offset += nlen
            arr, offset = tensor_from_bytes(buf, offset, context=f"entry '{name}'")
            if name in wm.entries:
                raise FormatError(f"duplicate entry name '{name}'")
            wm[name] = arr
        if offset != len(buf):
            raise FormatError(f"{len(buf) - offset} trailing bytes after last entry")
        return wm

    @classmethod
    def load(cls, path, provenance="base"):
        with open(path, "rb") as fh:
            buf = fh.read()
        return cls.from_bytes(buf, provenance=provenance)
