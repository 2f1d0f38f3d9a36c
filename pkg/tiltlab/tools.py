__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import configparser
import csv
import hashlib
import io
import os
import subprocess
import tempfile

from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np


def metadata_config() -> configparser.ConfigParser:
    """ Read the metadata.txt shipped with the package. """
    config = configparser.ConfigParser()
    config.read(Path(__file__).parent.joinpath('metadata.txt'), encoding='utf8')
    return config


def version() -> str:
    """ Return the version defined in metadata.txt. """
    return metadata_config()['general']['version'].strip()


def current_git_hash() -> str:
    """ Retrieve the current git hash number of the git repo (first 6 digit). """
    repo_dir = os.path.dirname(os.path.abspath(__file__))
    try:
        git_show = subprocess.Popen(
            ['git', 'rev-parse', '--short=6', 'HEAD'],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            cwd=repo_dir,
            universal_newlines=True,
            encoding='utf8'
        )
        hash_number = git_show.communicate()[0].partition('\n')[0]
    except (OSError, IndexError):
        hash_number = ''

    if hash_number == '':
        hash_number = 'unknown'
    return hash_number


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    """ Hex digest of a file content. """
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write_text(path: Union[str, Path], content: str):
    """ Write a text file through a temporary file and a rename.

    Line endings are always LF.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp = tempfile.mkstemp(prefix='.{}.'.format(path.name), dir=str(path.parent))
    try:
        with os.fdopen(fd, 'w', encoding='utf8', newline='\n') as f:
            f.write(content)
        os.replace(temp, str(path))
    except BaseException:
        if os.path.exists(temp):
            os.remove(temp)
        raise


def csv_text(rows: Sequence[Dict], fieldnames: List[str]) -> str:
    """ Comma separated, LF line endings, header row always present. """
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=fieldnames, lineterminator='\n', extrasaction='raise')
    writer.writeheader()
    for row in rows:
        writer.writerow({key: format_cell(value) for key, value in row.items()})
    return buffer.getvalue()


def format_cell(value) -> str:
    """ Floats are written with repr, so a CSV read back gives the same double. """
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    if value is None:
        return ''
    return str(value)
