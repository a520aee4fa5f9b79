import csv
import hashlib
import json
import os
from typing import Any
from typing import Iterable
from typing import List

import numpy as np
import tenacity
from loguru import logger
from PIL import Image
from tenacity import retry
from tenacity import retry_if_exception_type
from tenacity import stop_after_attempt
from tenacity import wait_random_exponential

from markerseg.settings.config import settings
from markerseg.utils.exceptions import ArtifactIOError

default_logger = logger.bind(module='FileUtils')


def io_retry_state_callback(retry_state: tenacity.RetryCallState):
    """
    Callback function to log retry attempts of file-system operations.

    Args:
        retry_state (tenacity.RetryCallState): The current state of the retry call.

    Returns:
        None
    """
    if retry_state and retry_state.outcome.failed:
        default_logger.warning(
            f'Encountered I/O exception: {retry_state.outcome.exception()} | args: {retry_state.args}',
        )


io_retry = retry(
    reraise=True,
    retry=retry_if_exception_type(OSError),
    wait=wait_random_exponential(multiplier=0.05, max=1),
    stop=stop_after_attempt(settings.io.retry_attempts),
    before_sleep=io_retry_state_callback,
)


def ensure_dir(directory: str) -> None:
    if directory and not os.path.exists(directory):
        os.makedirs(directory, exist_ok=True)


def read_json_file(
    file_path: str,
    logger: logger = default_logger,
) -> dict:
    """
    Read a JSON file and return its content as a dictionary.

    Args:
        file_path (str): The path to the JSON file to read.
        logger (logger, optional): The logger to use for logging. Defaults to default_logger.

    Returns:
        dict: The content of the JSON file as a dictionary.

    Raises:
        FileNotFoundError: If the specified file does not exist.
        ArtifactIOError: If the file exists but cannot be read or decoded.
    """
    if not os.path.exists(file_path):
        raise FileNotFoundError(f'File {file_path} not found')

    try:
        with open(file_path, 'r', encoding='utf-8') as f_:
            json_data = json.load(f_)
    except Exception as exc:
        logger.warning(f'Unable to read the {file_path} file')
        if settings.logs.trace_enabled:
            logger.opt(exception=True).error(exc)
        raise ArtifactIOError(file_path, exc) from exc
    return json_data


def write_json_file(
    directory: str,
    file_name: str,
    data: Any,
    logger: logger = default_logger,
) -> str:
    """
    Write data to a JSON file at the specified directory with the specified file name.

    Args:
        directory (str): The directory where the file will be created.
        file_name (str): The name of the file to be created.
        data (Any): The data to be written to the file.
        logger (logger, optional): The logger object to be used for logging.

    Returns:
        str: The path of the written file.

    Raises:
        ArtifactIOError: If there is an error while writing to the file.
    """
    file_path = os.path.join(directory, file_name)
    try:
        ensure_dir(directory)
        with open(file_path, 'w', encoding='utf-8') as f_:
            json.dump(data, f_, ensure_ascii=False, indent=4, sort_keys=True)
    except Exception as exc:
        logger.error(f'Unable to write to file {file_path}')
        raise ArtifactIOError(file_path, exc) from exc
    return file_path


def write_csv_file(file_path: str, header: List[str], rows: Iterable[Iterable[Any]]) -> str:
    """
    Write rows to a CSV file, creating parent directories as needed.

    Args:
        file_path (str): Destination path.
        header (List[str]): Column names.
        rows (Iterable[Iterable[Any]]): Row values, in column order.

    Returns:
        str: The path of the written file.
    """
    try:
        ensure_dir(os.path.dirname(file_path))
        with open(file_path, 'w', encoding='utf-8', newline='') as f_:
            writer = csv.writer(f_)
            writer.writerow(header)
            for row in rows:
                writer.writerow(row)
    except Exception as exc:
        default_logger.error('Unable to write CSV file {}', file_path)
        raise ArtifactIOError(file_path, exc) from exc
    return file_path


def read_csv_file(file_path: str) -> List[dict]:
    try:
        with open(file_path, 'r', encoding='utf-8', newline='') as f_:
            return list(csv.DictReader(f_))
    except Exception as exc:
        raise ArtifactIOError(file_path, exc) from exc


@io_retry
def _read_png(file_path: str) -> np.ndarray:
    with Image.open(file_path) as img:
        return np.array(img)


@io_retry
def _write_png(file_path: str, array: np.ndarray) -> None:
    ensure_dir(os.path.dirname(file_path))
    Image.fromarray(array).save(file_path, format='PNG')


def read_png(file_path: str) -> np.ndarray:
    """
    Read a single-channel PNG (8 or 16 bit) into a numpy array.

    Args:
        file_path (str): The PNG file to read.

    Returns:
        np.ndarray: The pixel grid, row-major (row = y, col = x).

    Raises:
        ArtifactIOError: If the file cannot be read after retries.
    """
    try:
        return _read_png(file_path)
    except Exception as exc:
        default_logger.opt(exception=settings.logs.trace_enabled).error('Unable to read PNG {}', file_path)
        raise ArtifactIOError(file_path, exc) from exc


def write_png(file_path: str, array: np.ndarray) -> str:
    try:
        _write_png(file_path, array)
    except Exception as exc:
        default_logger.opt(exception=settings.logs.trace_enabled).error('Unable to write PNG {}', file_path)
        raise ArtifactIOError(file_path, exc) from exc
    return file_path


@io_retry
def _read_npy(file_path: str) -> np.ndarray:
    return np.load(file_path, allow_pickle=False)


@io_retry
def _write_npy(file_path: str, array: np.ndarray) -> None:
    ensure_dir(os.path.dirname(file_path))
    np.save(file_path, array, allow_pickle=False)


def read_npy(file_path: str) -> np.ndarray:
    try:
        return _read_npy(file_path)
    except Exception as exc:
        raise ArtifactIOError(file_path, exc) from exc


def write_npy(file_path: str, array: np.ndarray) -> str:
    try:
        _write_npy(file_path, array)
    except Exception as exc:
        raise ArtifactIOError(file_path, exc) from exc
    return file_path


def sha256_file(file_path: str) -> str:
    digest = hashlib.sha256()
    try:
        with open(file_path, 'rb') as f_:
            for chunk in iter(lambda: f_.read(1 << 20), b''):
                digest.update(chunk)
    except Exception as exc:
        raise ArtifactIOError(file_path, exc) from exc
    return digest.hexdigest()


def sha256_json(data: Any) -> str:
    """Hash of the canonical (sorted-key) JSON encoding of `data`."""
    payload = json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()
