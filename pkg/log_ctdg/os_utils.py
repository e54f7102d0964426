import gzip
import io
import logging
import os
import zipfile

import numpy as np

logger = logging.getLogger(__name__)

# fixed so that identical arrays always give identical archive bytes
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def open_text(path: str):
    """Open a plain or gzip-compressed text file for reading."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"input file does not exist: {path}")
    if path.endswith(".gz"):
        return gzip.open(path, "rt", encoding="utf-8", errors="replace")
    return open(path, encoding="utf-8", errors="replace")


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def write_npz(path: str, arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` as an ``.npz`` archive with reproducible bytes.

    ``np.savez`` stamps each member with the current time, so two saves of the
    same arrays differ. Members here are written in sorted name order with a
    fixed timestamp and no compression. The result loads with ``np.load``.
    """
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(
                buf, np.asanyarray(arrays[name]), allow_pickle=False
            )
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    logger.debug("wrote %d arrays to %s", len(arrays), path)


def read_npz(path: str) -> dict[str, np.ndarray]:
    """Read every member of an ``.npz`` archive into a dict."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"archive does not exist: {path}")
    with np.load(path, allow_pickle=False) as data:
        return {name: data[name] for name in data.files}
