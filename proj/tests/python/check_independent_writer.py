"""Cross-checks the LBNZ reader against a writer that shares no code with it.

The model and dataset containers are assembled here with struct and zlib,
using f32 tensors and variance-form batch norm. Labels are the argmax of a
numpy forward pass, so `lbyl eval` must report accuracy 1.0 on them and 0.0
on labels shifted by one class.

usage: check_independent_writer.py <path-to-lbyl> <scratch-dir>
"""

import json
import pathlib
import struct
import subprocess
import sys
import zlib

import numpy as np


def container(manifest, payload):
    text = json.dumps(manifest).encode()
    body = b"LBNZ" + struct.pack("<IQ", 1, len(text)) + text + payload
    return body + struct.pack("<I", zlib.crc32(body))


class Payload:
    def __init__(self):
        self.data = bytearray()

    def add(self, name, array, dtype):
        raw = np.ascontiguousarray(array, dtype={"f32": "<f4", "f64": "<f8", "i32": "<i4"}[dtype]).tobytes()
        desc = {"name": name, "dtype": dtype, "shape": list(array.shape), "offset": len(self.data), "length": len(raw)}
        self.data += raw
        return desc


def conv(x, w, pad):
    c, width, height = x.shape
    xp = np.zeros((c, width + 2 * pad, height + 2 * pad))
    xp[:, pad:pad + width, pad:pad + height] = x
    m, _, k1, k2 = w.shape
    ow, oh = xp.shape[1] - k1 + 1, xp.shape[2] - k2 + 1
    out = np.zeros((m, ow, oh))
    for a in range(k1):
        for b in range(k2):
            out += np.einsum("oc,cxy->oxy", w[:, :, a, b], xp[:, a:a + ow, b:b + oh])
    return out


def main():
    lbyl, scratch = sys.argv[1], pathlib.Path(sys.argv[2])
    scratch.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(7)

    # Values are rounded to f32 first so both sides see identical numbers.
    w0 = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
    gamma = rng.uniform(0.5, 1.5, 4).astype(np.float32)
    beta = rng.normal(0, 0.1, 4).astype(np.float32)
    mean = rng.normal(0, 0.1, 4).astype(np.float32)
    var = rng.uniform(0.3, 2.0, 4).astype(np.float32)
    eps = 1e-5
    fc = rng.normal(size=(3, 16)).astype(np.float32)
    bias = rng.normal(size=3).astype(np.float32)

    p = Payload()
    layers = [
        {"kind": "conv", "activation": "relu", "bn": True, "bn_eps": eps, "stride": 1, "padding": 1,
         "shape": list(w0.shape),
         "tensors": [p.add("weight", w0, "f32"), p.add("bn.gamma", gamma, "f32"), p.add("bn.beta", beta, "f32"),
                     p.add("bn.mean", mean, "f32"), p.add("bn.var", var, "f32")]},
        {"kind": "maxpool", "activation": "none", "bn": False, "pool": 2, "tensors": []},
        {"kind": "flatten", "activation": "none", "bn": False, "tensors": []},
        {"kind": "fc", "activation": "none", "bn": False, "shape": [3, 16], "has_bias": True,
         "tensors": [p.add("weight", fc, "f32"), p.add("bias", bias, "f32")]},
    ]
    model = container({"kind": "model", "input_shape": [2, 4, 4], "metadata": {}, "layers": layers}, bytes(p.data))
    (scratch / "model.lbnz").write_bytes(model)

    inputs = rng.normal(size=(24, 2, 4, 4))
    sd = np.sqrt(var.astype(np.float64) + eps)
    logits = []
    for x in inputs:
        z = conv(x, w0.astype(np.float64), 1)
        a = np.maximum(0.0, gamma[:, None, None] * (z - mean[:, None, None]) / sd[:, None, None] + beta[:, None, None])
        pooled = a.reshape(4, 2, 2, 2, 2).max(axis=(2, 4))
        logits.append(fc.astype(np.float64) @ pooled.reshape(-1) + bias)
    labels = np.argmax(np.array(logits), axis=1).astype(np.int32)

    failures = 0
    for name, lab, expect in [("match", labels, 1.0), ("shifted", (labels + 1) % 3, 0.0)]:
        d = Payload()
        tensors = [d.add("inputs", inputs, "f64"), d.add("labels", lab, "i32")]
        path = scratch / f"data_{name}.lbnz"
        path.write_bytes(container({"kind": "dataset", "tensors": tensors}, bytes(d.data)))
        report = scratch / f"eval_{name}.json"
        subprocess.run([lbyl, "eval", "--model", str(scratch / "model.lbnz"), "--data", str(path),
                        "--report", str(report)], check=True)
        got = json.loads(report.read_text())["accuracy"]
        ok = got == expect
        failures += not ok
        print(f"{name}: accuracy {got} (expected {expect}) {'ok' if ok else 'MISMATCH'}")

    # A flipped payload byte must be rejected with the IO exit code.
    bad = bytearray(model)
    bad[len(bad) - 10] ^= 0x40
    (scratch / "bad.lbnz").write_bytes(bytes(bad))
    code = subprocess.run([lbyl, "eval", "--model", str(scratch / "bad.lbnz"), "--data",
                           str(scratch / "data_match.lbnz")], capture_output=True).returncode
    print(f"corrupted model exit code {code}")
    failures += code != 4
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
