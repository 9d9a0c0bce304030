"""
    Surrogate parameters (frozen encoder gains, adaptable decoder weights,
    dropout rate), dropout masks and the versioned CSV parameter file.

    File layout: columns block,position,value,name. Blocks appear in the
    order format_version, dropout_rate, encoder, decoder; encoder and decoder
    rows carry the feature name of their position.
"""

import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from rtwin.errors import MissingFileError, ValidationError
from rtwin.settings.config import DROPOUT_RATE, INIT_HIGH, INIT_LOW, PARAM_FORMAT_VERSION


def _readonly(values) -> np.ndarray:
    array = np.array(values, dtype=np.float64).ravel()
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class ParamVector:
    encoder: np.ndarray
    decoder: np.ndarray
    dropout_rate: float = DROPOUT_RATE
    names: tuple[str, ...] = ()

    def __post_init__(self):
        encoder, decoder = _readonly(self.encoder), _readonly(self.decoder)
        if encoder.size != decoder.size:
            raise ValidationError(
                f"Encoder has {encoder.size} weights but decoder has {decoder.size}"
            )
        if not (np.all(np.isfinite(encoder)) and np.all(np.isfinite(decoder))):
            raise ValidationError("Parameters must be finite")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"Dropout rate must be in [0, 1), got {self.dropout_rate}")
        names = tuple(self.names) or tuple(f"f{i}" for i in range(decoder.size))
        if len(names) != decoder.size:
            raise ValidationError("One feature name per decoder weight is required")
        object.__setattr__(self, "encoder", encoder)
        object.__setattr__(self, "decoder", decoder)
        object.__setattr__(self, "names", names)

    @property
    def n_features(self) -> int:
        return self.decoder.size

    def with_decoder(self, decoder) -> "ParamVector":
        return ParamVector(self.encoder, decoder, self.dropout_rate, self.names)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return (
            np.array_equal(self.encoder, other.encoder)
            and np.array_equal(self.decoder, other.decoder)
            and self.dropout_rate == other.dropout_rate
            and self.names == other.names
        )


@dataclass(frozen=True)
class DropoutMask:
    """Kept pattern over decoder weights for one stochastic forward pass."""

    seed: int
    kept: np.ndarray

    def __post_init__(self):
        kept = np.array(self.kept, dtype=bool).ravel()
        kept.flags.writeable = False
        object.__setattr__(self, "kept", kept)

    @classmethod
    def draw(cls, seed: int, dropout_rate: float, n_weights: int) -> "DropoutMask":
        rng = np.random.default_rng(seed)
        return cls(seed, rng.random(n_weights) >= dropout_rate)


def init_params(
    names,
    dropout_rate: float = DROPOUT_RATE,
    seed: int = 0,
    low: float = INIT_LOW,
    high: float = INIT_HIGH,
) -> ParamVector:
    """Encoder gains 1, decoder weights uniform in [low, high) from seed."""
    if high < low:
        raise ValidationError(f"Initialization range [{low}, {high}) is empty")
    names = tuple(names)
    rng = np.random.default_rng(seed)
    decoder = rng.uniform(low, high, size=len(names))
    return ParamVector(np.ones(len(names)), decoder, dropout_rate, names)


def save_params(params: ParamVector, path: str):
    rows = [
        ("format_version", 0, float(PARAM_FORMAT_VERSION), ""),
        ("dropout_rate", 0, float(params.dropout_rate), ""),
    ]
    for block, weights in (("encoder", params.encoder), ("decoder", params.decoder)):
        rows += [
            (block, position, float(value), params.names[position])
            for position, value in enumerate(weights)
        ]
    frame = pd.DataFrame(rows, columns=["block", "position", "value", "name"])
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False)


def load_params(path: str) -> ParamVector:
    if not os.path.exists(path):
        raise MissingFileError(f"Parameter file {path} does not exist")
    frame = pd.read_csv(path, float_precision="round_trip", keep_default_na=False)
    if list(frame.columns) != ["block", "position", "value", "name"]:
        raise ValidationError(f"{path}: unexpected columns {list(frame.columns)}")
    version = frame.loc[frame.block == "format_version", "value"]
    if len(version) != 1 or int(version.iloc[0]) != PARAM_FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported parameter format version")
    rate = frame.loc[frame.block == "dropout_rate", "value"]
    if len(rate) != 1:
        raise ValidationError(f"{path}: missing dropout rate")

    def block(name):
        rows = frame[frame.block == name].sort_values("position")
        if not np.array_equal(rows.position.to_numpy(), np.arange(len(rows))):
            raise ValidationError(f"{path}: {name} block positions are not contiguous")
        return rows

    encoder, decoder = block("encoder"), block("decoder")
    return ParamVector(
        encoder.value.to_numpy(dtype=np.float64),
        decoder.value.to_numpy(dtype=np.float64),
        float(rate.iloc[0]),
        tuple(str(name) for name in decoder.name),
    )
