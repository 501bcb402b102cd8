"""A module which implements the time frequency front-ends.

Constant-Q transform (CQT) and log linear filterbank (LLFB) energies, plus
the unification step that brings every representation to a fixed number of
frames.

License : BSD 3-clause
"""

from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.fft import fft, rfft
from scipy.signal import get_window

from .utils import logger, verbose, TooShort, EmptyInput

__all__ = ['cqt_frequencies', 'cqt_window_lengths', 'cqt', 'llfb',
           'llfb_filterbank', 'llfb_centers', 'unify', 'normalize_rows',
           'normalize_utterance']

_CHUNK = 256  # frames per FFT batch


def cqt_frequencies(p):
    """Center frequencies f_min * 2^(k/B) of all CQT rows"""
    n_bins = p['octaves'] * p['bins_per_octave']
    B = float(p["bins_per_octave"])
    return p["f_min"] * 2.0 ** (np.arange(n_bins) / B)


def cqt_window_lengths(p):
    """Odd Hann window length per bin from the gamma-widened bandwidth

    The bandwidth of bin k is alpha * f_k + gamma with
    alpha = 2^(1/B) - 2^(-1/B), so that gamma = 0 gives a constant-Q bank.
    """
    B = float(p['bins_per_octave'])
    alpha = 2.0 ** (1.0 / B) - 2.0 ** (-1.0 / B)
    bandwidth = alpha * cqt_frequencies(p) + p['gamma']
    return (2 * np.round(p['fs'] / bandwidth / 2.0) + 1).astype(int)


def _cqt_atoms(p, nfft):
    """Compute the complex CQT atoms, each centered in an nfft frame

    Parameters
    ----------
    p : dict
        CqtParams, see params.cqt_params.
    nfft : int
        Frame length. Must exceed the longest window.

    Returns
    -------
    Ws : generator of (offset, array)
        Start index of the atom in the frame, and the atom itself. Atoms are
        normalized by their window sum so a unit sinusoid gives |X| = 0.5.
    """
    center = nfft // 2
    for f, n in zip(cqt_frequencies(p), cqt_window_lengths(p)):
        t = np.arange(n) - n // 2
        window = np.hanning(n)
        W = window * np.exp(2.0 * 1j * np.pi * f * t / p['fs'])
        W /= window.sum()
        yield center - n // 2, W


@lru_cache(maxsize=4)
def _spectral_kernel(key):
    p = dict(key)
    n_max = int(cqt_window_lengths(p)[0])
    nfft = int(2 ** np.ceil(np.log2(n_max)))
    rows = []
    for offset, W in _cqt_atoms(p, nfft):
        # <x, W> = (1/nfft) * sum_f X(f) conj(W(f))
        K = np.conj(fft(W, nfft) * np.exp(-2j * np.pi * offset *
                                          np.arange(nfft) / nfft)) / nfft
        K[np.abs(K) < p['sparsity'] * np.abs(K).max()] = 0
        rows.append(sparse.csr_matrix(K))
    kernel = sparse.vstack(rows, format='csr')
    logger.debug('CQT kernel: %d bins, nfft %d, %d non-zeros' %
                 (kernel.shape[0], nfft, kernel.nnz))
    return kernel, nfft, n_max


def _kernel_key(p):
    return tuple(sorted((k, v) for k, v in p.items()
                        if k in ('fs', 'f_min', 'octaves', 'bins_per_octave',
                                 'gamma', 'sparsity')))


@verbose
def cqt(x, p, verbose=None):
    """Log-magnitude constant-Q transform

    Parameters
    ----------
    x : ndarray, shape (n_samples,)
        Waveform at p['fs'].
    p : dict
        CqtParams, see params.cqt_params.
    verbose : bool, str, int, or None
        The verbosity of messages to print. If a str, it can be either DEBUG,
        INFO, WARNING, ERROR, or CRITICAL.

    Returns
    -------
    tfr : ndarray, shape (octaves * bins_per_octave, len(x) // hop)
        log(|X| + log_floor). Row k is centered on f_min * 2^(k/B); column t
        is centered on sample t * hop.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel, nfft, n_max = _spectral_kernel(_kernel_key(p))
    if x.size < n_max:
        raise TooShort('CQT needs at least %d samples, got %d' %
                       (n_max, x.size))
    hop = p['hop']
    n_frames = x.size // hop
    padded = np.pad(x, (nfft // 2, nfft // 2))
    segments = np.lib.stride_tricks.sliding_window_view(
        padded, nfft)[::hop][:n_frames]

    X = np.empty((kernel.shape[0], n_frames))
    for start in range(0, n_frames, _CHUNK):
        seg = fft(segments[start:start + _CHUNK], axis=1)
        X[:, start:start + _CHUNK] = np.abs(kernel @ seg.T)
    logger.debug('CQT: %d samples -> %d x %d' % (x.size, X.shape[0],
                                                 n_frames))
    return np.log(X + p['log_floor'])


def llfb_centers(p):
    """Center frequencies of the linear triangular filters"""
    edges = np.linspace(0, p['fs'] / 2.0, p['n_filters'] + 2)
    return edges[1:-1]


def llfb_filterbank(p):
    """Triangular filters linearly spaced over [0, fs/2]

    Returns
    -------
    fb : ndarray, shape (n_filters, fft_bins // 2 + 1)
    """
    edges = np.linspace(0, p['fs'] / 2.0, p['n_filters'] + 2)
    freqs = np.arange(p['fft_bins'] // 2 + 1) * p['fs'] / float(p['fft_bins'])
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0, np.minimum(rising, falling))


@verbose
def llfb(x, p, verbose=None):
    """Log linear filterbank energies

    Framing, Hamming window, power spectrum, triangular filters and
    log(E + log_floor).

    Returns
    -------
    tfr : ndarray, shape (n_filters, (len(x) - frame_len) // frame_shift + 1)
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < p['frame_len']:
        raise TooShort('LLFB needs at least %d samples, got %d' %
                       (p['frame_len'], x.size))
    frames = np.lib.stride_tricks.sliding_window_view(
        x, p['frame_len'])[::p['frame_shift']]
    frames = frames * get_window('hamming', p['frame_len'], fftbins=False)
    power = np.abs(rfft(frames, p['fft_bins'], axis=1)) ** 2
    energies = llfb_filterbank(p) @ power.T
    return np.log(energies + p['log_floor'])


def unify(tfr, target_frames=400):
    """Truncate to the first target_frames columns, or tile cyclically

    Parameters
    ----------
    tfr : ndarray, shape (n_rows, T)
    target_frames : int

    Returns
    -------
    feature : ndarray, shape (n_rows, target_frames)
        Column j is tfr[:, j % T].
    """
    tfr = np.asarray(tfr)
    if tfr.ndim != 2 or tfr.shape[1] < 1:
        raise EmptyInput('Cannot unify a representation without frames')
    return tfr[:, np.arange(target_frames) % tfr.shape[1]]


def normalize_rows(feature, floor=1e-8):
    """Per-frequency-row mean and variance normalization"""
    mean = feature.mean(axis=1, keepdims=True)
    std = feature.std(axis=1, keepdims=True)
    return (feature - mean) / np.maximum(std, floor)


def normalize_utterance(feature, floor=1e-8):
    """Mean and variance normalization over the whole matrix

    Unlike normalize_rows, the spectral envelope (row offsets) survives.
    """
    return (feature - feature.mean()) / max(feature.std(), floor)
