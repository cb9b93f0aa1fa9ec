"""61-electrode montage on a unit-spaced grid (10-10 layout, rows front to back)."""
import numpy as np

_ROWS = [
    ["Fp1", "Fp2"],
    ["AF7", "AF3", "AF4", "AF8"],
    ["F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8"],
    ["FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8"],
    ["T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8"],
    ["TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8"],
    ["P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8"],
    ["PO9", "PO7", "PO3", "POz", "PO4", "PO8", "PO10"],
    ["O1", "Oz", "O2"],
]

# horizontal grid columns, midline at 0
_COLUMNS = {
    2: [-1.0, 1.0],
    3: [-1.0, 0.0, 1.0],
    4: [-3.0, -1.0, 1.0, 3.0],
    7: [-4.0, -3.0, -1.5, 0.0, 1.5, 3.0, 4.0],
    9: [-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0],
}

CHANNEL_NAMES: list[str] = [name for row in _ROWS for name in row]
N_CHANNELS = len(CHANNEL_NAMES)


def channel_positions() -> np.ndarray:
    """(61, 2) array of (x, y) grid coordinates in electrode spacings."""
    pos = []
    for y, row in enumerate(_ROWS):
        for x in _COLUMNS[len(row)]:
            pos.append((x, -float(y)))
    return np.asarray(pos)


def channel_index(name: str) -> int:
    try:
        return CHANNEL_NAMES.index(name)
    except ValueError:
        raise KeyError(f"unknown channel {name!r}") from None


def spatial_weights(center: str = "FCz", space_constant: float = 2.0) -> np.ndarray:
    """Unit weight at ``center``, decaying as exp(-distance / space_constant)."""
    pos = channel_positions()
    dist = np.linalg.norm(pos - pos[channel_index(center)], axis=1)
    return np.exp(-dist / space_constant)
