"""On-disk dataset: a JSON-lines index with byte offsets into a blob file
holding bit-packed map payloads and observation frame payloads."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import mapper
from .demogen import StepRecord
from .gridsim import Observation
from .mapper import MapDescription

OBS_MAGIC = b"MUVO"
OBS_FORMAT_VERSION = 1


def obs_frames_to_bytes(frames) -> bytes:
    n_frames = len(frames)
    n_rays = frames[0].depth.shape[0]
    out = [OBS_MAGIC, struct.pack("<HHHf", OBS_FORMAT_VERSION, n_frames, n_rays,
                                  float(frames[0].max_range))]
    for obs in frames:
        out.append(np.asarray(obs.depth, dtype="<f4").tobytes())
        cats = np.zeros(n_rays, dtype="<i2")
        dists = np.zeros(n_rays, dtype="<f4")
        for i, hit in enumerate(obs.hits):
            if hit is not None:
                cats[i], dists[i] = hit
        out.append(cats.tobytes())
        out.append(dists.tobytes())
    return b"".join(out)


def obs_frames_from_bytes(data: bytes) -> list:
    if data[:4] != OBS_MAGIC:
        raise ValueError("bad observation payload magic")
    version, n_frames, n_rays, max_range = struct.unpack_from("<HHHf", data, 4)
    if version != OBS_FORMAT_VERSION:
        raise ValueError(f"unsupported observation payload version {version}")
    off = 14
    frames = []
    for _ in range(n_frames):
        depth = np.frombuffer(data, dtype="<f4", count=n_rays, offset=off).copy()
        off += 4 * n_rays
        cats = np.frombuffer(data, dtype="<i2", count=n_rays, offset=off)
        off += 2 * n_rays
        dists = np.frombuffer(data, dtype="<f4", count=n_rays, offset=off)
        off += 4 * n_rays
        hits = [(int(c), float(d)) if c > 0 else None for c, d in zip(cats, dists)]
        frames.append(Observation(depth=depth, hits=hits, pose=None,
                                  max_range=float(max_range)))
    return frames


class DatasetWriter:
    """Append-only writer for (index.jsonl, blob) dataset pairs."""

    def __init__(self, index_path, blob_path):
        self.index_path = index_path
        self.blob_path = blob_path
        self._index = open(index_path, "w", encoding="utf-8")
        self._blob = open(blob_path, "wb")
        self._offset = 0

    def append(self, rec: StepRecord) -> None:
        map_bytes = mapper.map_to_bytes(rec.ego_map)
        obs_bytes = obs_frames_to_bytes(rec.frames)
        header = {
            "goal": rec.goal,
            "actions": rec.actions,
            "source": rec.source.value,
            "t": rec.t,
            "episode_seed": rec.episode_seed,
            "sectors": [[c, b] for c, b in rec.description.sectors],
            "recent": rec.description.recent_actions,
            "d": rec.d,
            "d_final": rec.d_final,
            "map_offset": self._offset,
            "map_len": len(map_bytes),
            "obs_offset": self._offset + len(map_bytes),
            "obs_len": len(obs_bytes),
        }
        if rec.raw is not None:
            header["raw"] = rec.raw
            header["r"] = rec.r
            header["rtg"] = rec.rtg
        self._blob.write(map_bytes)
        self._blob.write(obs_bytes)
        self._offset += len(map_bytes) + len(obs_bytes)
        self._index.write(json.dumps(header, sort_keys=True, separators=(",", ":")))
        self._index.write("\n")

    def close(self):
        self._index.close()
        self._blob.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class DatasetEntry:
    header: dict
    _blob_path: str

    def ego_map(self) -> mapper.SemanticMap:
        with open(self._blob_path, "rb") as f:
            f.seek(self.header["map_offset"])
            return mapper.map_from_bytes(f.read(self.header["map_len"]))

    def frames(self) -> list:
        with open(self._blob_path, "rb") as f:
            f.seek(self.header["obs_offset"])
            return obs_frames_from_bytes(f.read(self.header["obs_len"]))


class DatasetReader:
    def __init__(self, index_path, blob_path):
        self.index_path = str(index_path)
        self.blob_path = str(blob_path)
        with open(index_path, encoding="utf-8") as f:
            self.headers = [json.loads(line) for line in f if line.strip()]

    def __len__(self):
        return len(self.headers)

    def __getitem__(self, i) -> DatasetEntry:
        return DatasetEntry(self.headers[i], self.blob_path)

    def labeled(self) -> bool:
        return all("rtg" in h for h in self.headers)


def write_dataset(records, index_path, blob_path) -> None:
    with DatasetWriter(index_path, blob_path) as w:
        for rec in records:
            w.append(rec)


def relabel_index(index_path, labels) -> None:
    """Rewrite index lines with reward labels. labels[i] = (raw, r, rtg)."""
    with open(index_path, encoding="utf-8") as f:
        headers = [json.loads(line) for line in f if line.strip()]
    if len(labels) != len(headers):
        raise ValueError("label count does not match index length")
    with open(index_path, "w", encoding="utf-8") as f:
        for h, (raw, r, rtg) in zip(headers, labels):
            h["raw"], h["r"], h["rtg"] = float(raw), float(r), float(rtg)
            f.write(json.dumps(h, sort_keys=True, separators=(",", ":")))
            f.write("\n")
