"""Writers for the engine's on-disk formats.

The bridge only writes, never reads, these containers; the layouts are the
engine's documented interfaces.

SKVC: magic "SKVC" | format_version u32 | source_image_id u64
      | entry_count u32
      | index: (layer u16, timestep u16, head u16, n_tokens u32, dim u32,
                byte_offset u64) per entry, sorted by key
      | payload per entry: f32 little-endian K then V

.ten: magic "TEN1" | rank u32 | dims u32[rank] | f32 little-endian payload
"""

from __future__ import annotations

import struct

import numpy as np

SKVC_MAGIC = b"SKVC"
SKVC_VERSION = 1
_INDEX = struct.Struct("<HHHIIQ")
_HEADER_SIZE = 4 + 4 + 8 + 4


def write_skvc(entries, path, source_image_id: int = 0) -> int:
    """Write {(layer, timestep, head): (K, V)} to an SKVC file.

    K and V must be row-aligned 2-D float32 arrays. Returns payload bytes.
    """
    keys = sorted(entries)
    offset = _HEADER_SIZE + _INDEX.size * len(keys)
    index = []
    payload = []
    for key in keys:
        K, V = entries[key]
        K = np.ascontiguousarray(K, dtype="<f4")
        V = np.ascontiguousarray(V, dtype="<f4")
        if K.ndim != 2 or K.shape != V.shape:
            raise ValueError(f"K/V shape mismatch at {key}")
        layer, timestep, head = key
        index.append(_INDEX.pack(layer, timestep, head, K.shape[0], K.shape[1], offset))
        blob = K.tobytes() + V.tobytes()
        payload.append(blob)
        offset += len(blob)
    with open(path, "wb") as f:
        f.write(SKVC_MAGIC)
        f.write(struct.pack("<IQI", SKVC_VERSION, source_image_id, len(keys)))
        f.writelines(index)
        f.writelines(payload)
    return sum(len(b) for b in payload)


def write_ten(path, arr) -> None:
    a = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(b"TEN1")
        f.write(struct.pack("<I", a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
