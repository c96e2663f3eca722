"""
Format binaire des checkpoints (petit-boutiste)

    magic      4 octets  b'FCCK'
    version    uint32
    digest     32 octets SHA-256 du texte de configuration
    config     uint32 longueur + texte UTF-8 (configuration canonique de l'exécution)
    markups    uint32 longueur + texte UTF-8 du registre de markups (version 2, peut être vide)
    records    uint32 nombre d'enregistrements, puis pour chacun:
               uint16 longueur du nom + nom UTF-8, uint8 ndim, ndim x uint32 dimensions,
               données float64 petit-boutiste en ordre C
"""

import hashlib
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict

import numpy as np

MAGIC = b'FCCK'
VERSION = 2
SUPPORTED_VERSIONS = (1, 2)


class CheckpointError(ValueError):
    """Checkpoint illisible: magic, version, empreinte ou enregistrement invalide"""


@dataclass
class Checkpoint:
    config_text: str
    state: 'OrderedDict[str, np.ndarray]'
    markup_text: str = ''

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.config_text.encode('utf-8')).hexdigest()


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    config = checkpoint.config_text.encode('utf-8')
    markups = checkpoint.markup_text.encode('utf-8')
    parts = [MAGIC, struct.pack('<I', VERSION), hashlib.sha256(config).digest(),
             struct.pack('<I', len(config)), config,
             struct.pack('<I', len(markups)), markups, struct.pack('<I', len(checkpoint.state))]
    for name, array in checkpoint.state.items():
        encoded = name.encode('utf-8')
        array = np.asarray(array, dtype='<f8')
        parts.append(struct.pack('<H', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<B', array.ndim))
        parts.append(struct.pack(f'<{array.ndim}I', *array.shape))
        parts.append(np.ascontiguousarray(array).tobytes(order='C'))
    return b''.join(parts)


def decode_checkpoint(payload: bytes) -> Checkpoint:
    view = memoryview(payload)
    offset = 0

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(view):
            raise CheckpointError(f"Checkpoint tronqué à l'octet {offset} ({size} octets attendus)")
        chunk = bytes(view[offset:offset + size])
        offset += size
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("Signature de checkpoint invalide")
    version, = struct.unpack('<I', take(4))
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointError(f"Version de checkpoint non supportée: {version}")
    digest = take(32)
    length, = struct.unpack('<I', take(4))
    config = take(length)
    if hashlib.sha256(config).digest() != digest:
        raise CheckpointError("Empreinte de configuration incohérente avec le texte embarqué")
    try:
        config_text = config.decode('utf-8')
    except UnicodeDecodeError as e:
        raise CheckpointError(f"Texte de configuration non UTF-8: {e}") from e

    markup_text = ''
    if version >= 2:
        markup_length, = struct.unpack('<I', take(4))
        try:
            markup_text = take(markup_length).decode('utf-8')
        except UnicodeDecodeError as e:
            raise CheckpointError(f"Registre de markups non UTF-8: {e}") from e

    count, = struct.unpack('<I', take(4))
    state = OrderedDict()
    for _ in range(count):
        name_length, = struct.unpack('<H', take(2))
        name = take(name_length).decode('utf-8')
        ndim, = struct.unpack('<B', take(1))
        shape = struct.unpack(f'<{ndim}I', take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * size), dtype='<f8').astype(np.float64).reshape(shape)
        if name in state:
            raise CheckpointError(f"Enregistrement dupliqué: {name}")
        state[name] = data
    if offset != len(view):
        raise CheckpointError(f"{len(view) - offset} octets inattendus en fin de checkpoint")
    return Checkpoint(config_text, state, markup_text)


def save_checkpoint(path: str, config_text: str, state: Dict[str, np.ndarray],
                    markup_text: str = '') -> str:
    """Écrit le checkpoint et retourne l'empreinte de la configuration"""
    checkpoint = Checkpoint(config_text, OrderedDict(state), markup_text)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as handle:
        handle.write(encode_checkpoint(checkpoint))
    return checkpoint.digest


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.isfile(path):
        raise CheckpointError(f"Checkpoint introuvable: {path}")
    with open(path, 'rb') as handle:
        return decode_checkpoint(handle.read())
