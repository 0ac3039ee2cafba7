"""Named parameter groups with freeze flags, checksums, and the binary
checkpoint format (magic "MUVP")."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node

CKPT_MAGIC = b"MUVP"
CKPT_FORMAT_VERSION = 1


@dataclass
class ParamGroup:
    name: str
    tensors: dict  # name -> np.ndarray (f64), insertion-ordered
    frozen: bool = False
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    opt_t: int = 0

    def checksum(self) -> str:
        h = hashlib.sha256()
        for tname in sorted(self.tensors):
            h.update(tname.encode())
            h.update(self.tensors[tname].tobytes())
        return h.hexdigest()

    def num_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())


class ParamSet:
    """Ordered collection of ParamGroups."""

    def __init__(self, groups=()):
        self.groups: dict[str, ParamGroup] = {}
        for g in groups:
            self.add(g)

    def add(self, group: ParamGroup) -> None:
        if group.name in self.groups:
            raise ValueError(f"duplicate group {group.name!r}")
        self.groups[group.name] = group

    def __contains__(self, name):
        return name in self.groups

    def __getitem__(self, name) -> ParamGroup:
        return self.groups[name]

    def remove(self, name) -> None:
        del self.groups[name]

    def set_frozen(self, frozen_names) -> None:
        """Freeze exactly the named groups, thaw the rest."""
        frozen = set(frozen_names)
        unknown = frozen - set(self.groups)
        if unknown:
            raise KeyError(f"unknown groups: {sorted(unknown)}")
        for name, g in self.groups.items():
            g.frozen = name in frozen

    def set_trainable(self, trainable_names) -> None:
        self.set_frozen(set(self.groups) - set(trainable_names))

    def checksums(self) -> dict:
        return {name: g.checksum() for name, g in self.groups.items()}

    def leaves(self) -> dict:
        """Fresh autodiff leaf Nodes for every tensor: group -> name -> Node."""
        return {gname: {tname: Node(t, name=f"{gname}.{tname}")
                        for tname, t in g.tensors.items()}
                for gname, g in self.groups.items()}

    def grads_from_leaves(self, leaves) -> dict:
        """Collect gradients after a backward pass; frozen groups get zeros."""
        grads = {}
        for gname, g in self.groups.items():
            for tname, t in g.tensors.items():
                node = leaves[gname][tname]
                if g.frozen or node.grad is None:
                    grads[(gname, tname)] = np.zeros_like(t)
                else:
                    grads[(gname, tname)] = node.grad
        return grads

    # -- checkpoint I/O -------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = [CKPT_MAGIC, struct.pack("<HH", CKPT_FORMAT_VERSION, len(self.groups))]
        for g in self.groups.values():
            name = g.name.encode()
            out.append(struct.pack("<H", len(name)))
            out.append(name)
            out.append(struct.pack("<BH", int(g.frozen), len(g.tensors)))
            for tname, t in g.tensors.items():
                tn = tname.encode()
                out.append(struct.pack("<H", len(tn)))
                out.append(tn)
                out.append(struct.pack("<B", t.ndim))
                out.append(struct.pack(f"<{t.ndim}I", *t.shape))
                out.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamSet":
        if data[:4] != CKPT_MAGIC:
            raise ValueError("bad checkpoint magic")
        version, n_groups = struct.unpack_from("<HH", data, 4)
        if version != CKPT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 8
        pset = cls()
        for _ in range(n_groups):
            (nlen,) = struct.unpack_from("<H", data, off); off += 2
            name = data[off:off + nlen].decode(); off += nlen
            frozen, n_tensors = struct.unpack_from("<BH", data, off); off += 3
            tensors = {}
            for _ in range(n_tensors):
                (tlen,) = struct.unpack_from("<H", data, off); off += 2
                tname = data[off:off + tlen].decode(); off += tlen
                (ndim,) = struct.unpack_from("<B", data, off); off += 1
                shape = struct.unpack_from(f"<{ndim}I", data, off); off += 4 * ndim
                size = int(np.prod(shape)) if ndim else 1
                arr = np.frombuffer(data, dtype="<f8", count=size, offset=off)
                off += 8 * size
                tensors[tname] = arr.reshape(shape).astype(np.float64)
            pset.add(ParamGroup(name=name, tensors=tensors, frozen=bool(frozen)))
        return pset

    def save(self, path, manifest: dict | None = None) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())
        if manifest is not None:
            with open(str(path) + ".json", "w", encoding="utf-8") as f:
                json.dump(manifest, f, sort_keys=True, indent=1)
                f.write("\n")

    @classmethod
    def load(cls, path) -> "ParamSet":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def load_manifest(path) -> dict:
    with open(str(path) + ".json", encoding="utf-8") as f:
        return json.load(f)
