"""On-disk formats: session directories (meta.json, eeg.bin, events.jsonl) and model JSON files."""
import base64
import json
import logging
import math
import os
from pathlib import Path
from typing import Optional

import numpy as np

from .classifier_core import GenericModel, LdaModel
from .dsp import FilterSpec
from .errors import ArchiveFormatError, DimensionError, ModelFormatError
from .features import PcaModel
from .session import Block, Detection, ProbabilityStream, SessionLog, Trial

logger = logging.getLogger(__name__)

SESSION_FORMAT_VERSION = 1
MODEL_FORMAT_VERSION = 1
SAMPLE_DTYPE = np.dtype("<f4")
ARRAY_DTYPE = np.dtype("<f8")

META_FILE = "meta.json"
EEG_FILE = "eeg.bin"
EVENTS_FILE = "events.jsonl"
STREAMS_FILE = "probabilities.jsonl"


def _finite_or_none(value):
    return None if value is None or (isinstance(value, float) and math.isnan(value)) else value


def _nan_if_none(value):
    return float("nan") if value is None else float(value)


# ---------------- Session archive ----------------
def write_session(session: SessionLog, directory) -> Path:
    """Write a session directory; an existing one is overwritten."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)

    meta = {
        "format_version": SESSION_FORMAT_VERSION,
        "participant_id": session.participant_id,
        "sample_rate": session.sample_rate,
        "channel_names": list(session.channel_names),
        "n_frames": session.n_frames,
        "profile": session.profile,
        "blocks": [{"index": b.index, "start_sample": b.start_sample, "stop_sample": b.stop_sample,
                    "threshold": _finite_or_none(b.threshold)} for b in session.blocks],
        "threshold_history": session.threshold_history,
    }
    with open(out / META_FILE, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)

    # frame-interleaved: all channels of frame t, then frame t + 1
    np.ascontiguousarray(session.samples.T, dtype=SAMPLE_DTYPE).tofile(out / EEG_FILE)

    with open(out / EVENTS_FILE, "w", encoding="utf-8") as f:
        for ev in session.events():
            payload = {k: _finite_or_none(v) for k, v in ev.payload.items()}
            f.write(json.dumps({"t": ev.t, "kind": ev.kind, "payload": payload}) + "\n")

    with open(out / STREAMS_FILE, "w", encoding="utf-8") as f:
        for block in sorted(session.streams):
            stream = session.streams[block]
            f.write(json.dumps({"block": block, "times": stream.times.tolist(),
                                "probabilities": stream.probabilities.tolist()}) + "\n")

    logger.info(f"[ARCHIVE] Wrote session {session.participant_id} to {out} "
                f"({session.n_frames} frames, {len(session.trials)} trials)")
    return out


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    rows = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ArchiveFormatError(f"{path.name} line {n}: {e}") from e
    return rows


def _trials_from_events(events: list[dict]) -> tuple[list[Trial], list[Detection]]:
    trials: dict[str, Trial] = {}
    detections = []
    for ev in events:
        kind, t, payload = ev["kind"], ev["t"], ev["payload"]
        if kind == "trial_start":
            trials[payload["trial_id"]] = Trial(
                trial_id=payload["trial_id"], block=payload["block"], index=payload["index"],
                kind=payload["kind"], target=payload["target"], start=t,
                error_distance=payload.get("error_distance"))
        elif kind == "detection":
            detections.append(Detection(time=t, probability=payload["probability"], block=payload["block"],
                                        window_index=payload["window_index"]))
        elif kind in ("error_marker", "error_onset", "virtual_onset", "feedback", "trial_end"):
            trial = trials.get(payload["trial_id"])
            if trial is None:
                raise ArchiveFormatError(f"{kind} event for unknown trial {payload['trial_id']}")
            if kind == "trial_end":
                trial.end = t
            elif kind == "feedback":
                trial.feedback = payload["feedback"]
                trial.corrected = bool(payload["corrected"])
            else:
                setattr(trial, kind, t)
    return list(trials.values()), detections


def read_session(directory) -> SessionLog:
    src = Path(directory)
    try:
        with open(src / META_FILE, encoding="utf-8") as f:
            meta = json.load(f)
    except FileNotFoundError as e:
        raise ArchiveFormatError(f"{src} has no {META_FILE}") from e
    except json.JSONDecodeError as e:
        raise ArchiveFormatError(f"{META_FILE}: {e}") from e
    if meta.get("format_version") != SESSION_FORMAT_VERSION:
        raise ArchiveFormatError(f"unsupported session format version {meta.get('format_version')}")

    try:
        n_channels = len(meta["channel_names"])
        n_frames = int(meta["n_frames"])
        eeg_path = src / EEG_FILE
        expected = n_frames * n_channels * SAMPLE_DTYPE.itemsize
        if not eeg_path.exists() or os.path.getsize(eeg_path) != expected:
            raise ArchiveFormatError(f"{EEG_FILE} should hold {expected} bytes ({n_frames} frames x {n_channels} channels)")
        samples = np.fromfile(eeg_path, dtype=SAMPLE_DTYPE).reshape(n_frames, n_channels).T.astype(np.float32)

        events = _read_jsonl(src / EVENTS_FILE)
        times = [ev["t"] for ev in events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ArchiveFormatError(f"{EVENTS_FILE} is not sorted by time")
        trials, detections = _trials_from_events(events)
        for trial in trials:
            if trial.is_error and (trial.error_marker is None or trial.error_onset is None):
                raise ArchiveFormatError(f"error trial {trial.trial_id} lacks a marker or corrected onset")

        blocks = [Block(index=b["index"], start_sample=b["start_sample"], stop_sample=b["stop_sample"],
                        threshold=_nan_if_none(b["threshold"])) for b in meta["blocks"]]
        streams = {}
        for row in _read_jsonl(src / STREAMS_FILE):
            streams[row["block"]] = ProbabilityStream(block=row["block"], times=np.asarray(row["times"], dtype=float),
                                                      probabilities=np.asarray(row["probabilities"], dtype=float))
    except KeyError as e:
        raise ArchiveFormatError(f"missing field {e} in session archive {src}") from e

    session = SessionLog(participant_id=meta["participant_id"], sample_rate=meta["sample_rate"],
                         channel_names=list(meta["channel_names"]), samples=samples, blocks=blocks,
                         trials=trials, detections=detections, streams=streams, profile=meta.get("profile", {}),
                         threshold_history=meta.get("threshold_history", []))
    logger.info(f"[ARCHIVE] Read session {session.participant_id}: {n_frames} frames, {len(trials)} trials")
    return session


# ---------------- Model file ----------------
def _encode(array) -> dict:
    arr = np.asarray(array, dtype=ARRAY_DTYPE)
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(obj) -> np.ndarray:
    try:
        raw = base64.b64decode(obj["data"], validate=True)
        return np.frombuffer(raw, dtype=ARRAY_DTYPE).reshape(obj["shape"]).astype(float)
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"bad array field: {e}") from e


def model_to_dict(model: GenericModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "threshold": model.threshold,
        "filter": model.filter_spec.to_dict(),
        "n_channels": model.n_channels,
        "window_s": model.window_s,
        "leap_s": model.leap_s,
        "pca": {"mean": _encode(model.pca.mean), "components": _encode(model.pca.components),
                "explained_variance": _encode(model.pca.explained_variance),
                "explained_variance_ratio": _encode(model.pca.explained_variance_ratio)},
        "lda": {"weights": _encode(model.lda.weights), "bias": model.lda.bias,
                "shrinkage": model.lda.shrinkage, "classes": list(model.lda.classes)},
    }


def model_from_dict(doc: dict) -> GenericModel:
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unknown model format version {version!r}")
    try:
        pca = PcaModel(mean=_decode(doc["pca"]["mean"]), components=_decode(doc["pca"]["components"]),
                       explained_variance=_decode(doc["pca"]["explained_variance"]),
                       explained_variance_ratio=_decode(doc["pca"]["explained_variance_ratio"]))
        lda = LdaModel(weights=_decode(doc["lda"]["weights"]), bias=float(doc["lda"]["bias"]),
                       shrinkage=float(doc["lda"]["shrinkage"]), classes=tuple(doc["lda"]["classes"]))
        return GenericModel(pca=pca, lda=lda, threshold=float(doc["threshold"]),
                            filter_spec=FilterSpec(**doc["filter"]), n_channels=int(doc["n_channels"]),
                            window_s=float(doc["window_s"]), leap_s=float(doc["leap_s"]))
    except KeyError as e:
        raise ModelFormatError(f"model file lacks field {e}") from e
    except (ValueError, DimensionError) as e:
        raise ModelFormatError(str(e)) from e


def save_model(model: GenericModel, path, training: Optional[dict] = None) -> Path:
    """Write the model file; ``training`` records where the training epochs came from."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = model_to_dict(model)
    if training is not None:
        doc["training"] = training
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
    logger.info(f"[ARCHIVE] Saved model (k={model.pca.k}, tau={model.threshold:.3f}) to {path}")
    return path


def _read_model_doc(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: {e}") from e
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{path}: top level is not an object")
    return doc


def load_model(path) -> GenericModel:
    return model_from_dict(_read_model_doc(path))


def read_training_record(path) -> Optional[dict]:
    """Training provenance stored with the model, or None for a model saved without one."""
    record = _read_model_doc(path).get("training")
    if record is not None and not isinstance(record, dict):
        raise ModelFormatError(f"{path}: training record is not an object")
    return record
