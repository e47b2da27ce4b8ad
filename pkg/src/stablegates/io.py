"""Text file formats for models, datasets, certificates and traces.

Floats are written with Python's shortest round-trip representation, so every
float64 survives a save/load cycle bit-exactly.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .bench.dataset import Normalization, SequenceDataset, SequenceRecord
from .rnn import LAYER_TENSORS, LayerParams, Mode, NetworkParams
from .stability import IssGains, LayerCertificate, NetworkCertificate
from .training import TrainConfig, TrainReport

MODEL_FORMAT = "stablegates-model"
DATASET_FORMAT = "stablegates-dataset"
CERT_FORMAT = "stablegates-certificate"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def _num(x: float) -> str:
    return repr(float(x))


def _tensor(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _untensor(d: dict) -> np.ndarray:
    try:
        return np.array(d["data"], dtype=np.float64).reshape(d["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"malformed tensor entry: {exc}") from exc


def _normalization_dict(norm: Normalization | None):
    if norm is None:
        return None
    return {k: [float(v) for v in getattr(norm, k)] for k in ("u_min", "u_max", "y_min", "y_max")}


def _normalization_from(d) -> Normalization | None:
    if d is None:
        return None
    return Normalization(**{k: np.array(d[k], dtype=np.float64) for k in ("u_min", "u_max", "y_min", "y_max")})


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1, allow_nan=False) + "\n"


def config_digest(config: TrainConfig) -> str:
    d = asdict(config)
    d["mode"] = Mode(d["mode"]).value
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- models


def model_to_text(net: NetworkParams, normalization: Normalization | None = None,
                  provenance: dict | None = None) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "mode": net.mode.value,
        "n_u": net.n_u,
        "n_y": net.n_y,
        "hidden_sizes": list(net.hidden_sizes),
        "layers": [{name: _tensor(getattr(p, name)) for name in LAYER_TENSORS} for p in net.layers],
        "W_y": _tensor(net.W_y),
        "b_y": _tensor(net.b_y),
        "normalization": _normalization_dict(normalization),
        "provenance": provenance or {},
    }
    return _dump_json(doc)


def model_from_text(text: str) -> tuple[NetworkParams, Normalization | None, dict]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise FormatError("not a model file")
    if doc.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {doc.get('version')}")
    try:
        layers = tuple(LayerParams(**{n: _untensor(l[n]) for n in LAYER_TENSORS}) for l in doc["layers"])
        net = NetworkParams(layers, _untensor(doc["W_y"]), _untensor(doc["b_y"]), Mode(doc["mode"]))
        norm = _normalization_from(doc.get("normalization"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"corrupt model file: {exc}") from exc
    if list(net.hidden_sizes) != doc.get("hidden_sizes"):
        raise FormatError("declared hidden sizes do not match the stored tensors")
    return net, norm, doc.get("provenance", {})


def save_model(path, net, normalization=None, provenance=None):
    Path(path).write_text(model_to_text(net, normalization, provenance))


def load_model(path):
    return model_from_text(Path(path).read_text())


# ---------------------------------------------------------------- datasets


def _label(name: str, unit: str | None) -> str:
    return f"{name}[{unit}]" if unit else name


def dataset_split_to_text(ds: SequenceDataset, split: str) -> str:
    buf = io.StringIO()
    header = {
        "split": split,
        "sampling_time": float(ds.sampling_time),
        "inputs": list(ds.input_names),
        "outputs": list(ds.output_names),
        "input_units": list(ds.input_units),
        "output_units": list(ds.output_units),
        "normalization": _normalization_dict(ds.normalization),
    }
    buf.write(f"# {DATASET_FORMAT} v{FORMAT_VERSION}\n")
    for k, v in header.items():
        buf.write(f"# {k}: {json.dumps(v)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seq", "start", "k", *ds.input_names, *ds.output_names])
    for s in ds.split(split):
        for k in range(len(s)):
            w.writerow([s.id, s.start, k, *map(_num, s.u[k]), *map(_num, s.y[k])])
    return buf.getvalue()


def dataset_split_from_text(text: str) -> SequenceDataset:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(f"# {DATASET_FORMAT}"):
        raise FormatError("not a dataset file")
    header = {}
    i = 1
    while i < len(lines) and lines[i].startswith("# "):
        key, _, value = lines[i][2:].partition(": ")
        header[key] = json.loads(value)
        i += 1
    try:
        inputs, outputs = tuple(header["inputs"]), tuple(header["outputs"])
        split = header["split"]
    except KeyError as exc:
        raise FormatError(f"dataset header lacks {exc}") from exc
    rows = list(csv.reader(lines[i:]))
    if not rows or rows[0] != ["seq", "start", "k", *inputs, *outputs]:
        raise FormatError("dataset column header does not match the declared channels")
    n_u, n_y = len(inputs), len(outputs)
    grouped: dict[str, list] = {}
    starts: dict[str, int] = {}
    for r in rows[1:]:
        if len(r) != 3 + n_u + n_y:
            raise FormatError(f"row has {len(r)} columns, expected {3 + n_u + n_y}")
        grouped.setdefault(r[0], []).append([float(v) for v in r[3:]])
        starts.setdefault(r[0], int(r[1]))
    seqs = []
    for sid, vals in grouped.items():
        a = np.array(vals, dtype=np.float64)
        seqs.append(SequenceRecord(a[:, :n_u], a[:, n_u:], split, sid, starts[sid]))
    return SequenceDataset(seqs, float(header.get("sampling_time", 1.0)), inputs, outputs,
                           tuple(header.get("input_units", ())), tuple(header.get("output_units", ())),
                           _normalization_from(header.get("normalization")))


def save_dataset(ds: SequenceDataset, out_dir, splits=("train", "val", "test")) -> dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {}
    for split in splits:
        p = out_dir / f"{split}.csv"
        p.write_text(dataset_split_to_text(ds, split))
        paths[split] = p
    return paths


def load_dataset(data_dir, splits=("train", "val", "test")) -> SequenceDataset:
    """Merge the per-split files of a directory into one dataset; missing splits are skipped."""
    data_dir = Path(data_dir)
    parts = [dataset_split_from_text((data_dir / f"{s}.csv").read_text())
             for s in splits if (data_dir / f"{s}.csv").exists()]
    if not parts:
        raise FileNotFoundError(f"no dataset files in {data_dir}")
    first = parts[0]
    for p in parts[1:]:
        if (p.input_names, p.output_names) != (first.input_names, first.output_names):
            raise FormatError("dataset files disagree on channels")
        if _normalization_dict(p.normalization) != _normalization_dict(first.normalization):
            raise FormatError("dataset files disagree on normalization")
    seqs = [s for p in parts for s in p.sequences]
    return SequenceDataset(seqs, first.sampling_time, first.input_names, first.output_names,
                           first.input_units, first.output_units, first.normalization)


def read_trajectory_csv(path) -> list[SequenceRecord]:
    """Import measured sequences: columns ``seq``, ``split``, then ``u*`` and ``y*`` channels."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        u_cols = [c for c in cols if c.startswith("u")]
        y_cols = [c for c in cols if c.startswith("y")]
        if "seq" not in cols or "split" not in cols or not u_cols or not y_cols:
            raise FormatError("trajectory CSV needs seq, split, u* and y* columns")
        grouped: dict[str, tuple[str, list, list]] = {}
        for r in reader:
            entry = grouped.setdefault(r["seq"], (r["split"], [], []))
            entry[1].append([float(r[c]) for c in u_cols])
            entry[2].append([float(r[c]) for c in y_cols])
    return [SequenceRecord(np.array(u), np.array(y), split, sid) for sid, (split, u, y) in grouped.items()]


# ---------------------------------------------------------------- certificates


def certificate_to_dict(cert: NetworkCertificate) -> dict:
    return {
        "format": CERT_FORMAT,
        "version": FORMAT_VERSION,
        "mode": cert.mode.value,
        "verdict": cert.verdict,
        "schur_stable": cert.schur_stable,
        "violating_layers": cert.violating_layers,
        "marginal_layers": cert.marginal_layers,
        "layers": [
            {
                "sigma_bar_f": c.sigma_bar_f,
                "phi_bar_htilde": c.phi_bar_htilde,
                "rho": c.rho,
                "gamma_input": c.gamma_input,
                "delta_iss_holds": c.delta_iss_holds,
                "marginal": c.marginal,
                "iss_gains": c.iss_gains._asdict(),
            }
            for c in cert.per_layer
        ],
        "A_delta": [[float(v) for v in row] for row in cert.A_delta],
        "B_delta_u": [float(v) for v in cert.B_delta_u],
        "delta_iss_input_gain": cert.delta_iss_input_gain,
    }


def certificate_to_json(cert: NetworkCertificate) -> str:
    return _dump_json(certificate_to_dict(cert))


def certificate_from_json(text: str) -> NetworkCertificate:
    doc = json.loads(text)
    if doc.get("format") != CERT_FORMAT:
        raise FormatError("not a certificate report")
    per_layer = tuple(
        LayerCertificate(l["sigma_bar_f"], l["phi_bar_htilde"], l["rho"], l["gamma_input"],
                         IssGains(**l["iss_gains"]))
        for l in doc["layers"]
    )
    L = len(per_layer)
    A = np.array(doc["A_delta"], dtype=np.float64).reshape(L, L)
    return NetworkCertificate(Mode(doc["mode"]), per_layer, A, np.array(doc["B_delta_u"], dtype=np.float64),
                              doc["delta_iss_input_gain"])


def certificate_to_text(cert: NetworkCertificate) -> str:
    out = io.StringIO()
    out.write(f"architecture: {cert.mode.value.upper()}, {len(cert.per_layer)} layer(s)\n\n")
    out.write(f"{'layer':>5}  {'sigma_bar_f':>12}  {'phi_bar_h':>12}  {'rho':>12}  {'Gamma_u':>12}  verdict\n")
    for l, c in enumerate(cert.per_layer, start=1):
        flag = "ok" if c.delta_iss_holds else "VIOLATED"
        if c.marginal:
            flag += " (marginal)"
        out.write(f"{l:>5}  {c.sigma_bar_f:12.6f}  {c.phi_bar_htilde:12.6f}  {c.rho:12.6f}  {c.gamma_input:12.6f}  {flag}\n")
    out.write("\nISS gains (decay base, input gain, bias gain):\n")
    for l, c in enumerate(cert.per_layer, start=1):
        g = c.iss_gains
        out.write(f"  layer {l}: {g.beta_base:.6f}, {g.gamma_u_coeff:.6f}, {g.gamma_b_coeff:.6f}\n")
    out.write("\nA_delta:\n")
    for row in cert.A_delta:
        out.write("  " + "  ".join(f"{v:12.6g}" for v in row) + "\n")
    out.write("B_delta_u:\n  " + "  ".join(f"{v:12.6g}" for v in cert.B_delta_u) + "\n\n")
    out.write("ISS: holds unconditionally\n")
    out.write(f"deltaISS: {cert.verdict}\n")
    if cert.delta_iss_input_gain is not None:
        out.write(f"deltaISS input gain |(I - A_delta)^-1 B_delta_u|: {cert.delta_iss_input_gain:.6g}\n")
    return out.getvalue()


# ---------------------------------------------------------------- reports and traces


def train_report_to_csv(report: TrainReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_mse", "val_mse", "lr"])
    for epoch, tr, va, lr in report.rows():
        w.writerow([epoch, _num(tr), _num(va), _num(lr)])
    return buf.getvalue()


def train_report_from_csv(text: str) -> TrainReport:
    rows = list(csv.reader(text.splitlines()))
    if not rows or rows[0] != ["epoch", "train_mse", "val_mse", "lr"]:
        raise FormatError("not a training report")
    rep = TrainReport()
    for r in rows[1:]:
        rep.train_mse.append(float(r[1]))
        rep.val_mse.append(float(r[2]))
        rep.lr.append(float(r[3]))
    rep.best_epoch = int(np.argmin(rep.val_mse)) if rep.val_mse else None
    return rep


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in r])
