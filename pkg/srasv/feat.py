'''
Module: srasv.feat

Audio input and the unified feature cache.

Function Listing
================
    read_wav / write_wav: 16 kHz, 16-bit PCM, mono RIFF/WAVE files

    compute_feature: waveform -> unified CQT or LLFB matrix

    write_feature / read_feature: one flat binary file per utterance

    write_manifest / read_manifest: utterance id -> cache path lists

    extract_features: compute and cache features for many utterances,
    in parallel when params['threads'] > 1
'''

import os
import time
import struct
from collections import namedtuple

import numpy as np
from scipy.io import wavfile

from .utils import (logger, verbose, atomic_write, NotWav, UnsupportedFormat,
                    Truncated, CheckpointIOError, CorruptCheckpoint,
                    MalformedLine, DuplicateUtterance)
from . import tfr
from .params import cqt_params, llfb_params

Waveform = namedtuple('Waveform', ['samples', 'sample_rate', 'source_id'])

FEATURE_MAGIC = b'SRAV'
FEATURE_KINDS = {'cqt': 0, 'llfb': 1}
_HEADER = struct.Struct('<4sBII')


def read_wav(path, source_id=None):
    '''
    Reads a RIFF/WAVE file holding 16 kHz, 16-bit PCM, mono audio.

    Samples are scaled to [-1, 1] by division by 32768.

    Returns
    -------
    w : Waveform
    '''
    with open(path, 'rb') as f:
        data = f.read()
    if source_id is None:
        source_id = os.path.splitext(os.path.basename(path))[0]

    if len(data) < 12 or data[:4] != b'RIFF' or data[8:12] != b'WAVE':
        raise NotWav('%s is not a RIFF/WAVE file' % path)

    fmt = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack('<4sI', data[pos:pos + 8])
        body = pos + 8
        if body + size > len(data):
            raise Truncated('%s: chunk %r declares %d bytes, %d left' %
                            (path, chunk_id, size, len(data) - body))
        if chunk_id == b'fmt ':
            if size < 16:
                raise UnsupportedFormat('%s: short fmt chunk' % path)
            fmt = struct.unpack('<HHIIHH', data[body:body + 16])
        elif chunk_id == b'data':
            if fmt is None:
                raise UnsupportedFormat('%s: data before fmt chunk' % path)
            audio_format, channels, rate, _, _, bits = fmt
            if audio_format != 1 or bits != 16:
                raise UnsupportedFormat('%s: not 16-bit PCM' % path)
            if channels != 1:
                raise UnsupportedFormat('%s: %d channels' % (path, channels))
            if rate != 16000:
                raise UnsupportedFormat('%s: %d Hz' % (path, rate))
            pcm = np.frombuffer(data[body:body + size - size % 2],
                                dtype='<i2')
            if pcm.size == 0:
                raise Truncated('%s: empty data chunk' % path)
            return Waveform(pcm.astype(np.float64) / 32768.0, rate,
                            source_id)
        pos = body + size + (size % 2)
    raise Truncated('%s: no data chunk' % path)


def write_wav(path, samples, sample_rate=16000):
    '''Writes samples in [-1, 1] as 16-bit PCM mono'''
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767)
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    wavfile.write(path, sample_rate, pcm.astype(np.int16))


def compute_feature(w, params):
    '''
    Computes the unified time-frequency matrix of one waveform.

    params['features'] picks cqt or llfb. After unification,
    params['featNorm'] applies mean/variance normalization over the whole
    matrix ('utt'), per frequency row ('row') or not at all ('none').
    '''
    samples = w.samples if isinstance(w, Waveform) else w
    if params['features'] == 'cqt':
        raw = tfr.cqt(samples, cqt_params(params))
    else:
        raw = tfr.llfb(samples, llfb_params(params))
    feature = tfr.unify(raw, params['targetFrames'])
    if params['featNorm'] == 'utt':
        feature = tfr.normalize_utterance(feature)
    elif params['featNorm'] == 'row':
        feature = tfr.normalize_rows(feature)
    return feature.astype(np.float32)


def write_feature(path, feature, kind):
    feature = np.asarray(feature, dtype='<f4')
    rows, cols = feature.shape
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_KINDS[kind], rows, cols)
    atomic_write(path, header + feature.tobytes(order='C'))


def read_feature(path):
    '''
    Returns
    -------
    feature : ndarray, shape (rows, cols), float32
    kind : 'cqt' | 'llfb'
    '''
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except (IOError, OSError) as e:
        raise CheckpointIOError('Cannot read feature %s: %s' % (path, e))
    if len(data) < _HEADER.size:
        raise CorruptCheckpoint('%s: short feature header' % path)
    magic, kind, rows, cols = _HEADER.unpack(data[:_HEADER.size])
    kinds = dict((v, k) for k, v in FEATURE_KINDS.items())
    if magic != FEATURE_MAGIC or kind not in kinds:
        raise CorruptCheckpoint('%s: not a feature file' % path)
    if len(data) != _HEADER.size + 4 * rows * cols:
        raise CorruptCheckpoint('%s: expected %d x %d floats' %
                                (path, rows, cols))
    feature = np.frombuffer(data[_HEADER.size:], dtype='<f4')
    return feature.reshape(rows, cols).astype(np.float32), kinds[kind]


def write_manifest(path, entries):
    '''entries: list of (utt_id, path) pairs'''
    atomic_write(path, ''.join('%s %s\n' % e for e in entries), mode='w')


def read_manifest(path):
    '''
    Returns
    -------
    entries : list of (utt_id, path)
        Relative paths are resolved against the manifest directory.
    '''
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 2:
                raise MalformedLine('expected "utt_id path"', lineno)
            utt, p = fields
            if utt in seen:
                raise DuplicateUtterance('%s listed twice in %s' %
                                         (utt, path))
            seen.add(utt)
            entries.append((utt, os.path.join(base, p)))
    return entries


def _extract_one(utt, wav_path, out_path, params):
    w = read_wav(wav_path, source_id=utt)
    feature = compute_feature(w, params)
    write_feature(out_path, feature, params['features'])
    return utt, out_path


@verbose
def extract_features(wav_entries, out_dir, params, manifest=None,
                     verbose=True):
    '''
    Computes and caches unified features for a list of utterances.

    Parameters
    ----------
    wav_entries : list of (utt_id, wav_path)
    out_dir : str
        Directory receiving one <utt_id>.feat file per utterance.
    params : dict
        From params.generate_parameters. params['threads'] sets the number
        of joblib workers.
    manifest : str | None
        Where to write the "utt_id path" manifest (paths relative to it).

    Returns
    -------
    entries : list of (utt_id, feature_path), in input order
    '''
    startTime = time.time()
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(utt, wav, os.path.join(out_dir, utt + '.feat'))
            for utt, wav in wav_entries]
    nJobs = int(params.get('threads', 1))

    if nJobs == 1:
        results = [_extract_one(utt, wav, out, params)
                   for utt, wav, out in jobs]
    else:
        from joblib import Parallel, delayed
        P = Parallel(n_jobs=nJobs)
        results = P(delayed(_extract_one)(utt, wav, out, params)
                    for utt, wav, out in jobs)

    if manifest is not None:
        base = os.path.dirname(os.path.abspath(manifest))
        write_manifest(manifest, [(utt, os.path.relpath(p, base))
                                  for utt, p in results])
    logger.info('Extracted %d %s features in %.1f s' %
                (len(results), params['features'], time.time() - startTime))
    return results


def load_features(entries):
    '''Stacks cached features into (N, rows, cols) float32 with their ids'''
    ids = [utt for utt, _ in entries]
    feats = [read_feature(p)[0] for _, p in entries]
    if not feats:
        return ids, np.zeros((0, 0, 0), dtype=np.float32)
    return ids, np.stack(feats)
