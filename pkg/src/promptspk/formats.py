"""On-disk formats.

EMB1 embedding sets::

    b"EMB1" | u32 count | u32 dim | count*dim little-endian float64

with a sidecar ``<path>.jsonl`` holding one ``{"index", "speaker_id",
"condition_id"}`` object per row.

PFE1 checkpoints::

    b"PFE1" | u32 header length | UTF-8 JSON header | float64 LE parameters

The header records the system name, every network's layer dims and the
configs needed to rebuild the frozen encoder; parameters follow in layer
order (discriminative projection, its adapter, flow net, flow adapter).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .discriminative import DiscriminativeModel
from .flow import FlowConfig, FlowModel, VectorFieldNet
from .mathcore import MlpParams
from .prompt import EncoderConfig, FrozenEncoder, ImpressionSchema, LoraAdapter, load_schema, read_records, write_records
from .synthdata import SPLITS, SynthCorpus, SynthWorldConfig
from .systems import SYSTEMS, TrainedSystem

EMB_MAGIC = b"EMB1"
CKPT_MAGIC = b"PFE1"
_LE_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """Raised for malformed EMB1 / PFE1 files."""


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".jsonl")


def write_embeddings(path: str | Path, embeddings: np.ndarray, meta: list[dict] | None = None) -> None:
    x = np.ascontiguousarray(np.atleast_2d(embeddings), dtype=_LE_F64)
    if meta is not None and len(meta) != len(x):
        raise ValueError("sidecar metadata must have one entry per embedding")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<II", x.shape[0], x.shape[1]))
        fh.write(x.tobytes())
    if meta is not None:
        with open(sidecar_path(path), "w", encoding="utf-8", newline="\n") as fh:
            for i, row in enumerate(meta):
                doc = {"index": i, "speaker_id": row["speaker_id"], "condition_id": row.get("condition_id", row["speaker_id"])}
                fh.write(json.dumps(doc) + "\n")


def read_embeddings(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != EMB_MAGIC:
        raise FormatError(f"{path}: not an EMB1 file")
    count, dim = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != count * dim * 8:
        raise FormatError(f"{path}: expected {count}x{dim} floats, found {len(body)} bytes")
    return np.frombuffer(body, dtype=_LE_F64).astype(np.float64).reshape(count, dim)


def read_sidecar(path: str | Path) -> list[dict]:
    with open(sidecar_path(path), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- checkpoints ------------------------------------------------------------


def _mlp_header(params: MlpParams) -> dict:
    return {"dims": params.dims, "activations": list(params.activations)}


def _lora_header(adapter: LoraAdapter) -> dict:
    return {"rank": adapter.rank, "alpha": adapter.alpha, "in_dim": adapter.a.shape[1], "out_dim": adapter.b.shape[0]}


def save_checkpoint(path: str | Path, system: TrainedSystem) -> None:
    enc = asdict(system.encoder.config)
    enc["damped_questions"] = list(enc["damped_questions"])
    header = {"system": system.name, "d": system.d, "encoder": enc,
              "schema_version": system.encoder.schema.version}
    arrays = []
    if system.disc is not None:
        header["disc"] = {"projection": _mlp_header(system.disc.projection),
                          "adapter": _lora_header(system.disc.adapter)}
        arrays += system.disc.projection.arrays() + system.disc.adapter.arrays()
    if system.flow is not None:
        flow = system.flow
        header["flow"] = {"net": _mlp_header(flow.net.params), "mode": flow.mode, "d": flow.net.d,
                          "cond_dim": flow.net.cond_dim, "n_freqs": flow.net.n_freqs,
                          "config": asdict(flow.config)}
        arrays += flow.net.params.arrays()
        if flow.adapter is not None:
            header["flow"]["adapter"] = _lora_header(flow.adapter)
            arrays += flow.adapter.arrays()
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=_LE_F64).tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        end = self.pos + 8 * n
        if end > len(self.buf):
            raise FormatError("checkpoint truncated")
        out = np.frombuffer(self.buf[self.pos:end], dtype=_LE_F64).astype(np.float64).reshape(shape)
        self.pos = end
        return out

    def mlp(self, head: dict) -> MlpParams:
        dims = head["dims"]
        weights, biases = [], []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            weights.append(self.take((n_out, n_in)))
            biases.append(self.take((n_out,)))
        return MlpParams(weights, biases, list(head["activations"]))

    def lora(self, head: dict) -> LoraAdapter:
        a = self.take((head["rank"], head["in_dim"]))
        b = self.take((head["out_dim"], head["rank"]))
        return LoraAdapter(a, b, float(head["alpha"]))


def read_checkpoint_header(path: str | Path) -> dict:
    data = Path(path).read_bytes()
    return _split_checkpoint(data, path)[0]


def _split_checkpoint(data: bytes, path) -> tuple[dict, bytes]:
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a PFE1 checkpoint")
    (n,) = struct.unpack("<I", data[4:8])
    return json.loads(data[8:8 + n].decode("utf-8")), data[8 + n:]


def load_checkpoint(path: str | Path, schema: ImpressionSchema) -> TrainedSystem:
    header, body = _split_checkpoint(Path(path).read_bytes(), path)
    if header["system"] not in SYSTEMS:
        raise FormatError(f"{path}: unknown system {header['system']!r}")
    if header.get("schema_version", "") != schema.version:
        raise FormatError(f"{path}: trained with schema {header.get('schema_version')!r}, got {schema.version!r}")
    enc_cfg = dict(header["encoder"])
    enc_cfg["damped_questions"] = tuple(enc_cfg["damped_questions"])
    encoder = FrozenEncoder(EncoderConfig(**enc_cfg), schema)
    reader = _Reader(body)
    system = TrainedSystem(header["system"], encoder)
    if "disc" in header:
        projection = reader.mlp(header["disc"]["projection"])
        adapter = reader.lora(header["disc"]["adapter"])
        system.disc = DiscriminativeModel(encoder, adapter, projection)
    if "flow" in header:
        fh = header["flow"]
        net = VectorFieldNet(reader.mlp(fh["net"]), fh["d"], fh["cond_dim"], fh["n_freqs"])
        adapter = reader.lora(fh["adapter"]) if "adapter" in fh else None
        system.flow = FlowModel(net, fh["mode"], encoder, adapter, system.disc, FlowConfig(**fh["config"]))
    if reader.pos != len(body):
        raise FormatError(f"{path}: {len(body) - reader.pos} trailing bytes")
    if system.d != header["d"]:
        raise FormatError(f"{path}: header d={header['d']} but networks output {system.d}")
    return system


# -- corpus directories -----------------------------------------------------

MANIFEST = "manifest.json"
SCHEMA_FILE = "schema.json"


def write_corpus(out_dir: str | Path, corpus: SynthCorpus, schema: ImpressionSchema) -> None:
    """Per split: ``<split>.jsonl`` records and ``<split>.emb`` ground-truth
    embeddings; plus ``schema.json`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {}
    for split in SPLITS:
        records, embeddings = corpus.split(split)
        write_records(out / f"{split}.jsonl", records)
        write_embeddings(out / f"{split}.emb", embeddings, [{"speaker_id": r.speaker_id} for r in records])
        splits[split] = {"count": len(records), "records": f"{split}.jsonl", "embeddings": f"{split}.emb",
                         "modes": [int(k) for k in corpus.modes[split]]}
    manifest = {"format": "promptspk-corpus/1", "schema_version": schema.version, "d": corpus.config.d,
                "world": corpus.config.to_dict(), "splits": splits}
    (out / SCHEMA_FILE).write_text(json.dumps(schema.to_dict(), indent=1, sort_keys=True) + "\n")
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_corpus(corpus_dir: str | Path) -> tuple[SynthCorpus, ImpressionSchema]:
    root = Path(corpus_dir)
    if not (root / MANIFEST).is_file():
        raise FileNotFoundError(f"{root}: no {MANIFEST}; not a corpus directory")
    manifest = json.loads((root / MANIFEST).read_text())
    schema = load_schema(root / SCHEMA_FILE)
    world = dict(manifest["world"])
    world["focus_questions"] = tuple(world["focus_questions"])
    corpus = SynthCorpus(SynthWorldConfig(**world))
    for split, entry in manifest["splits"].items():
        records = read_records(root / entry["records"])
        x = read_embeddings(root / entry["embeddings"])
        if len(records) != entry["count"] or len(x) != entry["count"]:
            raise FormatError(f"{root}: split {split!r} does not match its manifest count {entry['count']}")
        if x.shape[1] != manifest["d"]:
            raise FormatError(f"{root}: split {split!r} has dim {x.shape[1]}, manifest says {manifest['d']}")
        corpus.records[split] = records
        corpus.embeddings[split] = x
        corpus.modes[split] = np.array(entry["modes"], dtype=np.int64)
    return corpus, schema
