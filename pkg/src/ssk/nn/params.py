"""Named parameter storage, optimizer state and the binary checkpoint format."""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SSKP"
CHECKPOINT_VERSION = 1


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """
    Every learnable array and normalization buffer of a model, by unique name.

    Buffers (running statistics) are saved with the parameters but never
    receive gradients.
    """

    values: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: set[str] = field(default_factory=set)
    optimizer: dict[str, AdamState] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, buffer: bool = False) -> None:
        if name in self.values:
            raise ValueError(f"Duplicate parameter name: {name}")
        self.values[name] = np.array(value, dtype=np.float64)
        if buffer:
            self.buffers.add(name)

    def get(self, name: str) -> np.ndarray:
        try:
            return self.values[name]
        except KeyError:
            raise KeyError(f"Unknown parameter: {name}") from None

    def is_trainable(self, name: str) -> bool:
        return name in self.values and name not in self.buffers

    def trainable_names(self) -> list[str]:
        return [name for name in self.values if name not in self.buffers]

    def update_buffers(self, updates: dict[str, np.ndarray]) -> None:
        for name, value in updates.items():
            if name not in self.buffers:
                raise KeyError(f"Not a buffer: {name}")
            self.values[name] = np.array(value, dtype=np.float64)

    def num_parameters(self) -> int:
        return int(sum(self.values[n].size for n in self.trainable_names()))

    def to_bytes(self) -> bytes:
        """
        Serialize every entry in name order.

        Layout (little-endian): magic, u32 version, u32 count, then per entry
        u32 name length, UTF-8 name, u32 ndim, ndim × u64 dims, f64 payload.
        """
        chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(self.values))]
        for name in sorted(self.values):
            value = self.values[name]
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<I", value.ndim))
            chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
            chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return b"".join(chunks)

    def load_bytes(self, data: bytes) -> None:
        """Overwrite registered entries from a checkpoint; names and shapes must match."""
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError("Not an ssk checkpoint (bad magic)")
        version, count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"Unsupported checkpoint version: {version}")
        offset = 12
        loaded: dict[str, np.ndarray] = {}
        try:
            for _ in range(count):
                (length,) = struct.unpack_from("<I", data, offset)
                offset += 4
                name = data[offset:offset + length].decode("utf-8")
                offset += length
                (ndim,) = struct.unpack_from("<I", data, offset)
                offset += 4
                shape = struct.unpack_from(f"<{ndim}Q", data, offset)
                offset += 8 * ndim
                size = int(np.prod(shape, dtype=np.int64))
                payload = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
                offset += 8 * size
                loaded[name] = payload.reshape(shape).astype(np.float64)
        except (struct.error, ValueError) as e:
            raise ValueError(f"Truncated checkpoint: {e}") from e
        if offset != len(data):
            raise ValueError(f"Trailing bytes in checkpoint: {len(data) - offset}")

        unknown = sorted(set(loaded) - set(self.values))
        missing = sorted(set(self.values) - set(loaded))
        if unknown or missing:
            raise ValueError(f"Checkpoint mismatch: unknown={unknown[:5]}, missing={missing[:5]}")
        for name, value in loaded.items():
            if value.shape != self.values[name].shape:
                raise ValueError(f"Shape mismatch for {name}: {value.shape} vs {self.values[name].shape}")
            self.values[name] = value

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        logger.info(f"Saved {len(self.values)} tensors to {path}")

    def load(self, path: Path) -> None:
        if not path.is_file():
            raise FileNotFoundError(f"Checkpoint not found: {path}")
        self.load_bytes(path.read_bytes())
