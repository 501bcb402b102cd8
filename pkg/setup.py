# -*- coding: utf-8 -*-
"""
Setup details for SRasv
"""

from setuptools import setup, find_packages

setup(
    name='SRasv',
    version='0.1.0a1',
    packages=find_packages(include=['srasv', 'srasv.*']),
    python_requires='>=3.7',
    install_requires=['numpy>=1.20', 'scipy>=1.8', 'joblib', 'decorator'],
    extras_require={'test': ['pytest']},
    entry_points={'console_scripts': ['srasv = srasv.cli:main']},
    license='BSD (3 Clause)',
    description=('Spoofing-robust automatic speaker verification: CQT and'
                 ' log filterbank front-ends, a multi-task residual network'
                 ' trained with angular-margin softmax, a PLDA back-end with'
                 ' adaptive score normalization, score fusion and t-DCF'
                 ' evaluation'),
    long_description=open('README.rst').read(),
)
