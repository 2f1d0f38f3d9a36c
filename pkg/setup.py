"""
Install tiltlab as standard python package.
"""

import configparser

from setuptools import setup

kwargs = {}

# Read tag from metadata
metadata = configparser.ConfigParser()
metadata.read('tiltlab/metadata.txt')

version_tag = metadata['general']['version'].replace("version", "").strip()

with open('README.md') as f:
    kwargs['long_description'] = f.read()
    kwargs['long_description_content_type'] = 'text/markdown'

setup(
    name='tiltlab',
    version=version_tag,
    author='Tiltlab developers',
    description="Distribution matching on small enumerable trajectory spaces",
    packages=['tiltlab', 'tiltlab.definitions', 'tiltlab.tiltlab_api'],
    package_data={'tiltlab': ['metadata.txt', 'configs/*.cfg']},
    python_requires='>=3.8',
    install_requires=[
        'numpy>=1.22',
        'scipy>=1.8',
    ],
    entry_points={
        'console_scripts': [
            'tiltlab = tiltlab.tiltlab_api.commands:main',
        ]
    },
    classifiers=[
        'Intended Audience :: Developers',
        'Intended Audience :: Science/Research',
        "Programming Language :: Python :: 3",
        "Operating System :: POSIX :: Linux",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    **kwargs
)
