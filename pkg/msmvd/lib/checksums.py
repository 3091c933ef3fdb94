import hashlib
import json
import os
import numpy as np

def dict_checksum(d: dict, verbose: bool = False) -> str:
    """
    SHA-256 of the canonical (sorted-key) JSON form of a dictionary.
    Stable across processes, unlike the builtin `hash`.
    """
    text = json.dumps(d, sort_keys = True, default = _canonical)
    result = hashlib.sha256(text.encode('utf-8')).hexdigest()
    if verbose:
        print(result)
    return result

def array_checksum(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a))
        h.update(str(a.dtype).encode('utf-8'))
        h.update(str(a.shape).encode('utf-8'))
        h.update(a.tobytes())
    return h.hexdigest()

def file_checksum(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda : f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()

def directory_checksum(path: str | os.PathLike, exclude: tuple[str] = (), verbose: bool = False) -> str:
    """
    Hash of every file below `path` (relative names and contents), walked in
        sorted order. Files whose relative name is in `exclude` are skipped.
    """
    h = hashlib.sha256()
    root = os.path.abspath(path)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for filename in sorted(filenames):
            full = os.path.join(dirpath, filename)
            rel = os.path.relpath(full, root).replace(os.sep, '/')
            if rel in exclude:
                continue
            h.update(rel.encode('utf-8'))
            h.update(file_checksum(full).encode('utf-8'))
    result = h.hexdigest()
    if verbose:
        print(result)
    return result

def _canonical(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    if isinstance(value, (tuple, set)):
        return list(value)
    return str(value)
