"""Single-file model checkpoints.

Byte layout (all integers little-endian)::

    8 bytes   magic b'CLDRCKPT'
    u16       format version
    u32       header length H
    H bytes   UTF-8 JSON header
    ...       payload: concatenated '<f4' tensors, C order

The header names the model kind and constructor config, the schema and its
sha256 digest, the snapshot version and, for every tensor, its name, shape,
payload offset and byte count. `payload_crc32` covers the whole payload.
Optimizer moments are stored as extra tensors named 'adam/<param>/exp_avg'
and 'adam/<param>/exp_avg_sq'.
"""

# ===== IMPORTS =====
# === Standard library ===
from dataclasses import dataclass
import json
import logging
import pathlib
import struct
from typing import Dict, Optional
import zlib

# === Thirdparty ===
import numpy as np
import torch

# === Local ===
import coldrank
from coldrank.exceptions import CheckpointMismatchError, CorruptCheckpointError, SchemaError
from coldrank.features.schema import FeatureSchema
from coldrank.models.cold import ColdModel
from coldrank.models.two_tower import TwoTowerModel
from coldrank.numerics import AdamState


# ===== GLOBALS =====
logger = logging.getLogger(__name__)
MAGIC = b'CLDRCKPT'
FORMAT_VERSION = 1
_PREFIX = struct.Struct('<8sHI')
REQUIRED_HEADER_KEYS = ('kind', 'config', 'schema', 'schema_digest', 'version', 'tensors', 'payload_crc32')
REQUIRED_ADAM_KEYS = ('step', 'learning_rate', 'beta1', 'beta2', 'epsilon')

MODEL_KINDS = {
    ColdModel.kind: ColdModel,
    TwoTowerModel.kind: TwoTowerModel,
}


# ===== CLASSES =====
@dataclass
class Checkpoint:
    model: torch.nn.Module
    adam: Optional[AdamState]
    header: Dict


# ===== FUNCTIONS =====
def create_model(kind, schema: FeatureSchema, config: Dict):
    try:
        model_class = MODEL_KINDS[kind]
    except KeyError:
        raise SchemaError(f'Unknown model kind \'{kind}\', expected one of {sorted(MODEL_KINDS)}') from None
    return model_class(schema, **config)


def save_model(model, path, adam: Optional[AdamState] = None, training: Optional[Dict] = None):
    path = pathlib.Path(path)
    coldrank.utils.mkdirs(files=[path])
    names = model.param_names()
    tensors = {name: p.detach() for name, p in model.named_parameters()}
    if adam is not None and adam.step > 0:
        tensors.update(adam.export_tensors(names))

    entries, chunks, offset = [], [], 0
    for name, tensor in tensors.items():
        data = np.ascontiguousarray(tensor.cpu().numpy(), dtype='<f4').tobytes()
        entries.append({'name': name, 'shape': list(tensor.shape), 'offset': offset, 'nbytes': len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b''.join(chunks)

    header = {
        'kind': model.kind,
        'config': model.config(),
        'schema': model.schema.to_dict(),
        'schema_digest': model.schema.digest(),
        'version': model.version,
        'tensors': entries,
        'payload_crc32': zlib.crc32(payload),
    }
    if adam is not None:
        header['adam'] = {
            'step': adam.step,
            'learning_rate': adam.learning_rate,
            'beta1': adam.beta1,
            'beta2': adam.beta2,
            'epsilon': adam.epsilon,
        }
    if training is not None:
        header['training'] = training
    header_bytes = json.dumps(header, sort_keys=True).encode('utf8')

    # write-then-rename keeps readers from seeing half a file
    tmp_path = path.with_name(path.name + '.tmp')
    with tmp_path.open('wb') as out_f:
        out_f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        out_f.write(header_bytes)
        out_f.write(payload)
    tmp_path.replace(path)
    logger.info('Saved %s model version %d (%d tensors) into \'%s\'',
                model.kind, model.version, len(entries), path)


def _read_header(blob, path):
    if len(blob) < _PREFIX.size:
        raise CorruptCheckpointError(f'\'{path}\' is too short to be a checkpoint')
    magic, format_version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError(f'\'{path}\' has bad magic bytes {magic!r}')
    if format_version != FORMAT_VERSION:
        raise CheckpointMismatchError(
            f'\'{path}\' has format version {format_version}, expected {FORMAT_VERSION}')
    start = _PREFIX.size
    if len(blob) < start + header_len:
        raise CorruptCheckpointError(f'\'{path}\' is truncated inside the header')
    try:
        header = json.loads(blob[start:start + header_len].decode('utf8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f'\'{path}\' has an unreadable header: {exc}') from exc
    _check_header(header, path)
    return header, blob[start + header_len:]


def _is_count(value):
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _check_header(header, path):
    if not isinstance(header, dict):
        raise CorruptCheckpointError(f'\'{path}\' header is not a JSON object')
    missing = [key for key in REQUIRED_HEADER_KEYS if key not in header]
    if missing:
        raise CorruptCheckpointError(f'\'{path}\' header lacks {missing}')
    if not isinstance(header['config'], dict) or not isinstance(header['tensors'], list):
        raise CorruptCheckpointError(f'\'{path}\' header has a malformed config or tensor table')
    if not _is_count(header['version']) or not _is_count(header['payload_crc32']):
        raise CorruptCheckpointError(f'\'{path}\' header has a malformed version or checksum')
    for entry in header['tensors']:
        try:
            shape = entry['shape']
            well_formed = (isinstance(entry['name'], str) and isinstance(shape, list)
                           and all(_is_count(d) for d in shape)
                           and _is_count(entry['offset']) and _is_count(entry['nbytes']))
        except (KeyError, TypeError):
            well_formed = False
        if not well_formed:
            raise CorruptCheckpointError(f'\'{path}\' has a malformed tensor entry {entry!r}')
        if entry['nbytes'] != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpointError(
                f'\'{path}\' tensor {entry["name"]} has shape {shape} but {entry["nbytes"]} bytes')
    if 'adam' in header:
        info = header['adam']
        if not isinstance(info, dict) or any(key not in info for key in REQUIRED_ADAM_KEYS):
            raise CorruptCheckpointError(f'\'{path}\' has a malformed optimizer block')


def _read_tensors(header, payload, path):
    expected = sum(e['nbytes'] for e in header['tensors'])
    if len(payload) != expected:
        raise CorruptCheckpointError(f'\'{path}\' payload has {len(payload)} bytes, header says {expected}')
    if zlib.crc32(payload) != header['payload_crc32']:
        raise CorruptCheckpointError(f'\'{path}\' payload checksum mismatch')
    tensors = {}
    for entry in header['tensors']:
        lo = entry['offset']
        if lo + entry['nbytes'] > len(payload):
            raise CorruptCheckpointError(f'\'{path}\' tensor {entry["name"]} runs past the payload')
        array = np.frombuffer(payload[lo:lo + entry['nbytes']], dtype='<f4').reshape(entry['shape'])
        tensors[entry['name']] = torch.from_numpy(array.astype(np.float32))
    return tensors


def load_checkpoint(path, schema: Optional[FeatureSchema] = None) -> Checkpoint:
    """Reads model and optimizer state; `schema` must match the stored digest when given."""
    path = pathlib.Path(path)
    logger.info('Loading checkpoint from \'%s\'', path)
    blob = path.read_bytes()
    header, payload = _read_header(blob, path)
    try:
        stored_schema = FeatureSchema.from_dict(header['schema'])
    except (KeyError, TypeError, ValueError, SchemaError) as exc:
        raise CorruptCheckpointError(f'\'{path}\' stores an unreadable schema: {exc}') from exc
    if stored_schema.digest() != header['schema_digest']:
        raise CorruptCheckpointError(f'\'{path}\' schema does not hash to its stored digest')
    if schema is not None and schema.digest() != header['schema_digest']:
        raise CheckpointMismatchError(
            f'\'{path}\' was trained on schema {header["schema_digest"][:12]}, '
            f'got {schema.digest()[:12]}')
    tensors = _read_tensors(header, payload, path)

    model = create_model(header['kind'], stored_schema, header['config'])
    names = model.param_names()
    missing = [n for n in names if n not in tensors]
    if missing:
        raise CheckpointMismatchError(f'\'{path}\' lacks parameters {missing}')
    with torch.no_grad():
        for name, param in model.named_parameters():
            if tuple(param.shape) != tuple(tensors[name].shape):
                raise CheckpointMismatchError(
                    f'Parameter {name} is {tuple(tensors[name].shape)}, model expects {tuple(param.shape)}')
            param.copy_(tensors[name])
    model.version = int(header['version'])

    adam = None
    if 'adam' in header:
        info = header['adam']
        adam = AdamState(learning_rate=info['learning_rate'], beta1=info['beta1'],
                         beta2=info['beta2'], epsilon=info['epsilon'])
        if info['step'] > 0:
            adam.load_tensors(list(model.parameters()), names, tensors, info['step'])
    logger.info('Loaded %s model version %d', header['kind'], model.version)
    return Checkpoint(model, adam, header)


def load_model(path, schema: Optional[FeatureSchema] = None):
    return load_checkpoint(path, schema).model
