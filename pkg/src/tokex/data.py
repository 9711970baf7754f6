"""Dataset and artifact IO.

Series files are either CSV (header ``id,label,channel,v0,v1,...``, one row
per channel per instance) or newline-delimited JSON objects with ``id``,
``label``, and ``values`` (list of channels). Token and attribution files
are newline-delimited JSON; the token format is also the ingestion point for
externally quantized corpora.
"""

from __future__ import annotations

import csv
import io
import json
import os
from collections import Counter

import numpy as np

from .attribution import AttributionVector
from .tokenizer import TimeSeries, TokenSequence, pad_to_length
from .util import write_atomic


def _parse_label(raw, where: str):
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise ValueError(f"{where}: unknown label {raw!r} (expected an integer)")


def _check_finite(values: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{where}: non-finite value")


def _load_series_csv(path: str) -> list[TimeSeries]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file")
        if header[:3] != ["id", "label", "channel"]:
            raise ValueError(f"{path}: header must start with id,label,channel")
        rows: dict[str, dict] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path}: row {line_no}"
            if len(row) < 4:
                raise ValueError(f"{where}: need id,label,channel and values")
            instance_id, label_raw, channel_raw = row[0], row[1], row[2]
            label = _parse_label(label_raw, where)
            try:
                channel = int(channel_raw)
            except ValueError:
                raise ValueError(f"{where}: channel must be an integer")
            cells = row[3:]
            while cells and cells[-1] == "":
                cells.pop()
            try:
                values = np.array([float(c) for c in cells])
            except ValueError:
                raise ValueError(f"{where}: non-numeric value")
            _check_finite(values, where)
            entry = rows.setdefault(instance_id, {"label": label, "channels": {},
                                                  "row": line_no})
            if entry["label"] != label:
                raise ValueError(f"{where}: label differs from earlier rows of "
                                 f"instance {instance_id!r}")
            if channel in entry["channels"]:
                raise ValueError(f"{where}: duplicate channel {channel} for "
                                 f"instance {instance_id!r}")
            entry["channels"][channel] = (values, line_no)
    out = []
    for instance_id, entry in rows.items():
        channels = entry["channels"]
        expected = list(range(len(channels)))
        if sorted(channels) != expected:
            raise ValueError(
                f"{path}: instance {instance_id!r} channels {sorted(channels)} "
                f"are not contiguous from 0"
            )
        lengths = {channels[c][0].size for c in expected}
        if len(lengths) != 1:
            offenders = {c: channels[c][0].size for c in expected}
            raise ValueError(
                f"{path}: instance {instance_id!r} has ragged channels "
                f"(lengths {offenders})"
            )
        values = np.stack([channels[c][0] for c in expected])
        out.append(TimeSeries(values=values, id=instance_id, label=entry["label"]))
    return out


def _load_series_ndjson(path: str) -> list[TimeSeries]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}: row {line_no}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{where}: invalid JSON ({exc})")
            for key in ("id", "values"):
                if key not in obj:
                    raise ValueError(f"{where}: missing key {key!r}")
            label = _parse_label(obj.get("label"), where)
            raw = obj["values"]
            if not raw or not isinstance(raw, list):
                raise ValueError(f"{where}: values must be a non-empty list of channels")
            lengths = {len(ch) for ch in raw}
            if len(lengths) != 1:
                raise ValueError(f"{where}: ragged channels (lengths {sorted(lengths)})")
            values = np.array(raw, dtype=np.float64)
            _check_finite(values, where)
            out.append(TimeSeries(values=values, id=str(obj["id"]), label=label))
    return out


def detect_format(path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".csv":
        return "csv"
    if ext in (".ndjson", ".jsonl", ".json"):
        return "ndjson"
    raise ValueError(f"cannot infer format from {path!r}; pass format explicitly")


def load_dataset(path: str, fmt: str = "auto",
                 pad_to_max: bool = True) -> list[TimeSeries]:
    """Load a series file and right-pad every instance to the dataset
    maximum length by repeating the last value.

    Pass pad_to_max=False to defer padding, e.g. for the zero-after-znorm
    policy where zeros must be appended after normalization.
    """
    if fmt == "auto":
        fmt = detect_format(path)
    if fmt == "csv":
        dataset = _load_series_csv(path)
    elif fmt == "ndjson":
        dataset = _load_series_ndjson(path)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    if not dataset:
        raise ValueError(f"{path}: no instances found")
    if pad_to_max:
        target = max(s.length for s in dataset)
        dataset = [pad_to_length(s, target, "repeat-last") for s in dataset]
    return dataset


def save_series(dataset: list[TimeSeries], path: str) -> None:
    buf = io.StringIO()
    for series in dataset:
        buf.write(json.dumps({"id": series.id, "label": series.label,
                              "values": series.values.tolist()},
                             sort_keys=True))
        buf.write("\n")
    write_atomic(path, buf.getvalue())


def label_histogram(dataset) -> dict:
    """Counts per label over TimeSeries or TokenSequence instances."""
    return dict(sorted(Counter(item.label for item in dataset).items(),
                       key=lambda kv: (kv[0] is None, kv[0])))


def load_tokens(path: str, vocab_size: int,
                expected_length: int | None = None) -> list[TokenSequence]:
    """Load a token corpus and validate it against the declared vocabulary
    size and (optionally) sequence length. The UNK id (== vocab_size) must
    never appear in stored corpora."""
    out = []
    bad_vocab = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}: row {line_no}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{where}: invalid JSON ({exc})")
            if "id" not in obj or "tokens" not in obj:
                raise ValueError(f"{where}: missing id or tokens")
            tokens = np.asarray(obj["tokens"], dtype=np.int64)
            if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
                bad_vocab.append(str(obj["id"]))
            out.append(TokenSequence(tokens=tokens, id=str(obj["id"]),
                                     label=_parse_label(obj.get("label"), where)))
    if bad_vocab:
        raise ValueError(
            f"{path}: token out of vocabulary (0..{vocab_size - 1}) in "
            f"instances: {bad_vocab}"
        )
    if not out:
        raise ValueError(f"{path}: no sequences found")
    lengths = {len(seq) for seq in out}
    if expected_length is not None:
        lengths.add(expected_length)
    if len(lengths) != 1:
        offenders = [seq.id for seq in out
                     if len(seq) != (expected_length or len(out[0]))]
        raise ValueError(f"{path}: mixed sequence lengths; offending ids: {offenders}")
    return out


def save_tokens(sequences: list[TokenSequence], path: str) -> None:
    buf = io.StringIO()
    for seq in sequences:
        buf.write(json.dumps({"id": seq.id, "label": seq.label,
                              "tokens": seq.tokens.tolist()}, sort_keys=True))
        buf.write("\n")
    write_atomic(path, buf.getvalue())


def save_attributions(attributions: list[AttributionVector], path: str) -> None:
    buf = io.StringIO()
    for attr in attributions:
        buf.write(json.dumps({"id": attr.instance_id, "method": attr.method,
                              "class": attr.target_class,
                              "scores": attr.scores.tolist()}, sort_keys=True))
        buf.write("\n")
    write_atomic(path, buf.getvalue())


def load_attributions(path: str) -> list[AttributionVector]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}: row {line_no}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{where}: invalid JSON ({exc})")
            scores = np.asarray(obj["scores"], dtype=np.float64)
            if not np.all(np.isfinite(scores)):
                raise ValueError(f"{where}: non-finite score")
            out.append(AttributionVector(scores=scores,
                                         method=str(obj.get("method", "")),
                                         target_class=int(obj.get("class", -1)),
                                         instance_id=str(obj["id"])))
    if not out:
        raise ValueError(f"{path}: no attributions found")
    return out
