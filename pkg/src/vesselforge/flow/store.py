"""Field files: a magic line, a one-line JSON header, then a little-endian f32 vector."""

import json

import numpy as np

from vesselforge.flow.fields import AnalyticField, ConstantField, LinearField, MLPField

MAGIC = b"VFFIELD 1\n"


def save_field(path, field):
    header = dict(field.header())
    payload = [np.asarray(field.params, dtype="<f4")]
    header["n_params"] = int(field.params.size)
    if isinstance(field, AnalyticField):
        payload.append(field.target.astype("<f4").ravel())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for part in payload:
            fh.write(part.tobytes())


def load_field(path):
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path}: not a field file")
        header = json.loads(fh.readline())
        data = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    n = int(header["n_params"])
    params, rest = data[:n], data[n:]
    kind = header["kind"]
    if kind == "analytic":
        field = AnalyticField(rest.reshape(header["target_shape"]))
    elif kind == "constant":
        field = ConstantField(header["value"])
    elif kind == "linear":
        field = LinearField(header["n_classes"])
    elif kind == "mlp":
        field = MLPField(header["hidden"], header["time_dim"], header["n_classes"], header["radius"])
    else:
        raise ValueError(f"{path}: unknown field kind {kind!r}")
    field.set_params(params)
    return field
