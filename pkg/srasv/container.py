"""
Named-blob binary container used for network checkpoints, PLDA models and
embedding stores.

Layout (little-endian)::

    magic (4 bytes) | version u32 | n_speakers u32 | kind u8
    repeated: name_len u16 | name | rank u8 | dims u32 * rank
              | float32 data | crc32 u32 (over name..data)
"""

import struct
import zlib
from collections import OrderedDict

import numpy as np

from .utils import atomic_write, CheckpointIOError, CorruptCheckpoint

VERSION = 1
_HEADER = struct.Struct('<4sIIB')


def pack(blobs, magic=b'SRNN', n_speakers=0, kind=0):
    """Serialize an ordered mapping name -> array to bytes"""
    out = [_HEADER.pack(magic, VERSION, n_speakers, kind)]
    for name, value in blobs.items():
        value = np.asarray(value, dtype='<f4')
        raw_name = name.encode('utf-8')
        record = (struct.pack('<H', len(raw_name)) + raw_name +
                  struct.pack('<B', value.ndim) +
                  struct.pack('<%dI' % value.ndim, *value.shape) +
                  value.tobytes(order='C'))
        out.append(record + struct.pack('<I', zlib.crc32(record)))
    return b''.join(out)


def unpack(data, magic=b'SRNN'):
    """Parse bytes written by pack()

    Returns
    -------
    header : dict
        version, n_speakers, kind
    blobs : OrderedDict of name -> float32 ndarray
    """
    if len(data) < _HEADER.size:
        raise CorruptCheckpoint('File shorter than its header')
    got, version, n_speakers, kind = _HEADER.unpack_from(data, 0)
    if got != magic:
        raise CorruptCheckpoint('Bad magic %r (expected %r)' % (got, magic))
    if version != VERSION:
        raise CorruptCheckpoint('Unsupported version %d' % version)

    blobs = OrderedDict()
    pos = _HEADER.size
    try:
        while pos < len(data):
            start = pos
            (name_len,) = struct.unpack_from('<H', data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode('utf-8')
            pos += name_len
            (rank,) = struct.unpack_from('<B', data, pos)
            pos += 1
            shape = struct.unpack_from('<%dI' % rank, data, pos)
            pos += 4 * rank
            n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + n_bytes + 4 > len(data):
                raise CorruptCheckpoint('Blob %s runs past end of file' % name)
            value = np.frombuffer(data, dtype='<f4', count=n_bytes // 4,
                                  offset=pos).reshape(shape)
            pos += n_bytes
            (crc,) = struct.unpack_from('<I', data, pos)
            if crc != zlib.crc32(data[start:pos]):
                raise CorruptCheckpoint('Checksum mismatch in blob %s' % name)
            pos += 4
            if name in blobs:
                raise CorruptCheckpoint('Blob %s stored twice' % name)
            blobs[name] = value.astype(np.float32)
    except (struct.error, UnicodeDecodeError) as e:
        raise CorruptCheckpoint('Truncated blob list: %s' % e)
    return dict(version=version, n_speakers=n_speakers, kind=kind), blobs


def save(path, blobs, magic=b'SRNN', n_speakers=0, kind=0):
    try:
        atomic_write(path, pack(blobs, magic, n_speakers, kind))
    except (IOError, OSError) as e:
        raise CheckpointIOError('Cannot write %s: %s' % (path, e))


def load(path, magic=b'SRNN'):
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except (IOError, OSError) as e:
        raise CheckpointIOError('Cannot read %s: %s' % (path, e))
    return unpack(data, magic)
