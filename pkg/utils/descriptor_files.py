"""
Descriptor and activation-map files

Descriptor CSV (one pooled vector per row):

    id,label,d0,d1,...,d{D-1}

Activation-map CSV (the tokens of one map on consecutive rows sharing an id;
every map has the same token count):

    id,label,c0,c1,...,c{D-1}

Activation maps may also come as a GGEM container holding an `activations`
tensor of shape (M, tokens, D) and an optional `labels` tensor of shape (M,).
"""

import re
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from ml.errors import FormatError
from ml.retrieval import DescriptorSet
from utils.file_io import PathLike, write_csv
from utils.tensor_container import is_container, read_container, write_container


ACTIVATIONS_TENSOR = 'activations'
LABELS_TENSOR = 'labels'


def _first_undecodable_line(path: Path) -> Optional[int]:
    for number, raw in enumerate(path.read_bytes().split(b'\n'), start=1):
        try:
            raw.decode('utf-8')
        except UnicodeDecodeError:
            return number
    return None


def _read_table(path: PathLike, prefix: str) -> Tuple[pd.Series, np.ndarray, np.ndarray]:
    """Parse an id,label,<prefix>0.. CSV into (ids, labels, values); errors carry the file line"""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"file not found: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise FormatError(f"{path} is empty", line=1)
    except UnicodeDecodeError:
        raise FormatError(f"{path.name} is not valid UTF-8", line=_first_undecodable_line(path))
    except pd.errors.ParserError as e:
        match = re.search(r'line (\d+)', str(e))
        raise FormatError(f"malformed CSV row in {path.name}", line=int(match.group(1)) if match else None)

    columns = list(frame.columns)
    expected = ['id', 'label'] + [f'{prefix}{i}' for i in range(len(columns) - 2)]
    if len(columns) < 3 or columns != expected:
        raise FormatError(f"header must be id,label,{prefix}0..{prefix}(D-1), got {','.join(columns)}", line=1)
    if frame.empty:
        raise FormatError(f"{path.name} has a header but no rows", line=2)

    numeric = frame[columns[1:]].apply(pd.to_numeric, errors='coerce')
    values = numeric.to_numpy(dtype=np.float64)
    bad_rows = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
    if bad_rows.size:
        raise FormatError(f"non-numeric or missing value in {path.name}", line=int(bad_rows[0]) + 2)
    if np.any(values[:, 0] != np.round(values[:, 0])) or np.any(values[:, 0] < 0):
        row = int(np.flatnonzero((values[:, 0] != np.round(values[:, 0])) | (values[:, 0] < 0))[0])
        raise FormatError(f"label must be a non-negative integer in {path.name}", line=row + 2)

    return frame['id'], values[:, 0].astype(np.int64), values[:, 1:]


def _normalise_ids(ids: pd.Series) -> np.ndarray:
    """Integer ids when every id is an integer, else strings"""
    numeric = pd.to_numeric(ids, errors='coerce')
    if numeric.notna().all() and (numeric == numeric.round()).all():
        return numeric.to_numpy(dtype=np.int64)
    return ids.to_numpy(dtype=object)


def read_descriptor_csv(path: PathLike) -> DescriptorSet:
    ids, labels, values = _read_table(path, 'd')
    return DescriptorSet.create(values, labels, _normalise_ids(ids))


def descriptor_frame(ids, labels, values) -> pd.DataFrame:
    values = np.asarray(values, dtype=np.float64)
    frame = pd.DataFrame(values, columns=[f'd{i}' for i in range(values.shape[1])])
    frame.insert(0, 'label', np.asarray(labels, dtype=np.int64))
    frame.insert(0, 'id', np.asarray(ids))
    return frame


def write_descriptor_csv(path: PathLike, descriptors: DescriptorSet) -> Path:
    return write_csv(path, descriptor_frame(descriptors.ids, descriptors.labels, descriptors.descriptors))


def read_activation_file(path: PathLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Load M activation maps

    Returns:
        (ids (M,), labels (M,), values (M, tokens, D))
    """
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"file not found: {path}")
    if is_container(path):
        return _read_activation_container(path)

    ids, labels, values = _read_table(path, 'c')
    order = list(dict.fromkeys(ids))
    groups = ids.groupby(ids, sort=False).indices

    counts = {len(groups[key]) for key in order}
    if len(counts) != 1:
        raise FormatError(f"activation maps in {path.name} have differing token counts {sorted(counts)}")

    maps, map_labels = [], []
    for key in order:
        rows = groups[key]
        if np.any(np.diff(rows) != 1):
            raise FormatError(f"tokens of map '{key}' are not on consecutive rows", line=int(rows[-1]) + 2)
        if len(set(labels[rows])) != 1:
            raise FormatError(f"map '{key}' has more than one label", line=int(rows[0]) + 2)
        maps.append(values[rows])
        map_labels.append(labels[rows[0]])

    return _normalise_ids(pd.Series(order)), np.array(map_labels, dtype=np.int64), np.stack(maps)


def _read_activation_container(path: Path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    tensors = read_container(path)
    if ACTIVATIONS_TENSOR not in tensors:
        raise FormatError(f"{path.name} has no '{ACTIVATIONS_TENSOR}' tensor")
    values = tensors[ACTIVATIONS_TENSOR]
    if values.ndim == 2:
        values = values[None]
    if values.ndim != 3:
        raise FormatError(f"'{ACTIVATIONS_TENSOR}' must be (M, tokens, D), got shape {values.shape}")

    count = values.shape[0]
    labels = tensors.get(LABELS_TENSOR, np.zeros(count))
    if labels.shape != (count,):
        raise FormatError(f"'{LABELS_TENSOR}' must have shape ({count},), got {labels.shape}")
    return np.arange(count), labels.astype(np.int64), values


def write_activation_csv(path: PathLike, values: np.ndarray, labels=None, ids=None) -> Path:
    values = np.asarray(values, dtype=np.float64)
    count, tokens, channels = values.shape
    labels = np.zeros(count, dtype=np.int64) if labels is None else np.asarray(labels)
    ids = np.arange(count) if ids is None else np.asarray(ids)

    frame = pd.DataFrame(values.reshape(count * tokens, channels), columns=[f'c{i}' for i in range(channels)])
    frame.insert(0, 'label', np.repeat(labels, tokens))
    frame.insert(0, 'id', np.repeat(ids, tokens))
    return write_csv(path, frame)


def write_activation_container(path: PathLike, values: np.ndarray, labels=None) -> Path:
    tensors = {ACTIVATIONS_TENSOR: np.asarray(values, dtype=np.float64)}
    if labels is not None:
        tensors[LABELS_TENSOR] = np.asarray(labels, dtype=np.float64)
    return write_container(path, tensors)
