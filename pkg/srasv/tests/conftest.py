import numpy as np
import pytest

from srasv.params import generate_parameters
from srasv.feat import write_wav


def pytest_configure(config):
    config.addinivalue_line('markers',
                            'slow: desk-scale end-to-end runs (minutes)')


@pytest.fixture
def params():
    return generate_parameters(verbose=False)


@pytest.fixture
def tone_wav(tmp_path):
    """Writes a sine fixture and returns its path"""
    def make(freq=1000., amplitude=0.5, n=16000, name='tone.wav'):
        t = np.arange(n) / 16000.
        path = str(tmp_path / name)
        write_wav(path, amplitude * np.sin(2 * np.pi * freq * t))
        return path
    return make
