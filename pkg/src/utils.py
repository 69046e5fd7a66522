import csv
import hashlib
import json
import logging
import os
from datetime import timedelta

import numpy as np
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

LOG_ENV_VAR = 'ALGCTL_LOG'
LOG_LEVELS = {'error': logging.ERROR, 'warn': logging.WARNING, 'info': logging.INFO, 'debug': logging.DEBUG}


def configure_logging(quiet: bool = False) -> int:
    """
    Install one stream handler on the root logger, at the level named by ALGCTL_LOG
    (error, warn, info, debug; warn by default). quiet forces error.

    Returns:
        int: The logging level in effect.
    """
    name = os.environ.get(LOG_ENV_VAR, 'warn').strip().lower()
    level = logging.ERROR if quiet else LOG_LEVELS.get(name, logging.WARNING)
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, '_algctl', False):
            root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter('%(levelname)s %(name)s: %(message)s'))
    handler._algctl = True
    root.addHandler(handler)
    root.setLevel(level)
    if name not in LOG_LEVELS:
        logging.getLogger(__name__).warning("%s=%r is not one of %s; using warn", LOG_ENV_VAR, name,
                                            ', '.join(LOG_LEVELS))
    return level


def file_digest(path: str) -> str:
    """
    SHA-256 of the file bytes.
    """
    with open(path, 'rb') as f:
        return hashlib.sha256(f.read()).hexdigest()


def format_float(value: float) -> str:
    '''
    Shortest decimal string that reads back to the same double.
    '''
    return repr(float(value))


def format_elapsed(seconds: float) -> str:
    return str(timedelta(seconds=seconds)).split('.')[0]


def ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def write_csv(path: str, header: list, rows: np.ndarray) -> str:
    '''
    Write a numeric table with round-trip float formatting and "\\n" line endings.

    Args:
        path (str): Output file.
        header (list): Column names.
        rows (np.ndarray): One row per record, len(header) columns.

    Returns:
        str: The path written.
    '''
    rows = np.asarray(rows, dtype=float).reshape(-1, len(header))
    ensure_parent(path)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) for v in row])
    return path


def read_csv(path: str) -> tuple:
    '''
    Read a table written by write_csv.

    Returns:
        tuple: (header list, rows as a 2-D float array).
    '''
    with open(path, newline='') as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, np.array(rows, dtype=float).reshape(-1, len(header))


def write_json(path: str, data: dict) -> str:
    ensure_parent(path)
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def plot_trajectory(record, filename: str) -> str:
    '''
    Plot costate components and the Hamiltonian drift of a trajectory record and
    save the figure.

    Args:
        record (TrajectoryRecord): The trajectory.
        filename (str): Image path.

    Returns:
        str: The path written.
    '''
    fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(7, 6))
    for k in range(record.eta.shape[1]):
        top.plot(record.times, record.eta[:, k], label=f'eta{k + 1}')
    top.set_ylabel('Costate')
    top.legend(loc='best')
    bottom.plot(record.times, record.hamiltonian - record.hamiltonian[0], color='#AD1515')
    bottom.set_ylabel('H(t) - H(0)')
    bottom.set_xlabel('t')
    ensure_parent(filename)
    fig.savefig(filename)
    plt.close(fig)
    return filename
