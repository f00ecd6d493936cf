"""Evaluation: participant-level splits, modality ablations, metrics, and
the distance-error benchmark grid.

Participant-level splitting keeps every participant's windows entirely on one
side of the train/test divide. The default split puts the lowest ids in
training; a seeded random split is available for robustness runs.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import forest
from .errors import ConfigurationError, ValidationError
from .features import (
    CHANNELS,
    FEATURE_DESCRIPTIONS,
    FEATURE_NAMES,
    N_FEATURES,
    FeatureVector,
    WindowSpec,
    channel_indices,
    extract_session,
)
from .forest import RandomForestModel, TrainConfig
from .fusion import load_fused_csv
from .postures import PostureLabel
from .seeding import derive_seed
from .simulator import (
    DEFAULT_PIPELINE_DELAY_S,
    AcousticSceneConfig,
    Condition,
    ParticipantModel,
    PostureProfile,
    calibrated_ranging_config,
    load_manifest,
    scene_for_condition,
    synth_capture,
)
from .acoustic import DEFAULT_CHIRP, generate_chirp, range_dual

METRICS_CSV_HEADER = "metric,class,value"
DISTANCE_ERRORS_CSV_HEADER = "distance_m,condition,n,mean_abs_error_m,std_m"

BENCHMARK_DISTANCES_M = (0.25, 0.50, 1.00)


class Modality(enum.Enum):
    """Which feature channels a classifier may see."""

    IMU_ONLY = "imu"
    AUDIO_ONLY = "audio"
    FUSED = "fused"

    @property
    def feature_indices(self) -> tuple[int, ...]:
        if self is Modality.IMU_ONLY:
            return tuple(channel_indices("pitch")) + tuple(channel_indices("displacement"))
        if self is Modality.AUDIO_ONLY:
            return tuple(channel_indices("distance1")) + tuple(channel_indices("distance2"))
        return tuple(range(N_FEATURES))


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint participant id sets for training and testing."""

    train_participants: frozenset[int]
    test_participants: frozenset[int]

    def __post_init__(self):
        train = frozenset(self.train_participants)
        test = frozenset(self.test_participants)
        object.__setattr__(self, "train_participants", train)
        object.__setattr__(self, "test_participants", test)
        if not train or not test:
            raise ConfigurationError("both split sides must be nonempty")
        if train & test:
            raise ConfigurationError("train and test participants overlap")


def default_split(participant_ids: Sequence[int], n_train: int = 10) -> SplitSpec:
    """Lowest n ids train, the rest test."""
    ids = sorted(set(participant_ids))
    if len(ids) <= n_train:
        raise ConfigurationError(
            f"need more than {n_train} participants for a {n_train}-train split"
        )
    return SplitSpec(frozenset(ids[:n_train]), frozenset(ids[n_train:]))


def random_split(participant_ids: Sequence[int], n_train: int, seed: int) -> SplitSpec:
    ids = sorted(set(participant_ids))
    if not (0 < n_train < len(ids)):
        raise ConfigurationError("n_train must leave both sides nonempty")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    shuffled = list(rng.permutation(ids))
    return SplitSpec(frozenset(shuffled[:n_train]), frozenset(shuffled[n_train:]))


@dataclass
class MetricsReport:
    """Classification quality on the test side of one split."""

    accuracy: float
    per_class: dict[PostureLabel, dict[str, float]]  # precision/recall/f1 (+flag)
    macro_f1: float
    confusion: np.ndarray  # rows true, cols predicted, class order
    n_test: int
    session_majority_accuracy: Optional[float] = None
    predict_latency_us: Optional[dict[str, float]] = None


def compute_metrics(
    true_labels: Sequence[PostureLabel], predicted_labels: Sequence[PostureLabel]
) -> MetricsReport:
    """Accuracy, per-class precision/recall/F1 (0/0 defined as 0 and flagged),
    macro-F1, and the full confusion matrix."""
    if len(true_labels) != len(predicted_labels):
        raise ValidationError("label sequences must have equal length")
    if not true_labels:
        raise ValidationError("label sequences must be nonempty")
    order = list(PostureLabel)
    k = len(order)
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        confusion[order.index(t), order.index(p)] += 1

    accuracy = float(np.trace(confusion)) / len(true_labels)
    per_class: dict[PostureLabel, dict[str, float]] = {}
    f1s = []
    for i, label in enumerate(order):
        tp = float(confusion[i, i])
        col = float(confusion[:, i].sum())
        row = float(confusion[i, :].sum())
        undefined = col == 0 or row == 0
        precision = tp / col if col > 0 else 0.0
        recall = tp / row if row > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class[label] = {
            "precision": precision, "recall": recall, "f1": f1,
            "undefined": float(undefined),
        }
        f1s.append(f1)
    return MetricsReport(
        accuracy=accuracy,
        per_class=per_class,
        macro_f1=float(np.mean(f1s)),
        confusion=confusion,
        n_test=len(true_labels),
    )


def load_dataset_features(
    manifest_path, window: WindowSpec = WindowSpec()
) -> tuple[list[FeatureVector], list[tuple[int, str, int]]]:
    """Extract windowed features for every recording in a dataset manifest.

    Returns the vectors plus an aligned (participant, posture, session) key
    per vector so session-majority accuracy can be computed later.
    """
    vectors: list[FeatureVector] = []
    keys: list[tuple[int, str, int]] = []
    for row in load_manifest(manifest_path):
        fused = load_fused_csv(row["path"])
        session_vectors = extract_session(
            fused, window, participant_id=row["participant"]
        )
        vectors.extend(session_vectors)
        keys.extend(
            [(row["participant"], row["posture"].value, row["session"])]
            * len(session_vectors)
        )
    return vectors, keys


def run_ablation(
    vectors: Sequence[FeatureVector],
    split: SplitSpec,
    modality: Modality,
    cfg: TrainConfig,
    session_keys: Optional[Sequence[tuple]] = None,
    benchmark_latency: bool = False,
) -> tuple[MetricsReport, RandomForestModel]:
    """Train on the split's train participants with the modality's features,
    evaluate on its test participants. Deterministic given the seed."""
    ids = {v.participant_id for v in vectors}
    missing = (split.train_participants | split.test_participants) - ids
    if missing:
        raise ConfigurationError(f"split names unknown participants: {sorted(missing)}")

    train_vecs = [v for v in vectors if v.participant_id in split.train_participants]
    test_idx = [i for i, v in enumerate(vectors) if v.participant_id in split.test_participants]
    if not test_idx:
        raise ConfigurationError("empty test set")
    test_vecs = [vectors[i] for i in test_idx]

    model = forest.train(train_vecs, cfg, feature_indices=modality.feature_indices)
    X_test = np.stack([v.values for v in test_vecs])
    predicted, _probs = forest.predict_batch(model, X_test)
    truth = [v.label for v in test_vecs]
    report = compute_metrics(truth, predicted)

    if session_keys is not None:
        by_session: dict[tuple, list[tuple[PostureLabel, PostureLabel]]] = {}
        for local, global_i in enumerate(test_idx):
            by_session.setdefault(tuple(session_keys[global_i]), []).append(
                (truth[local], predicted[local])
            )
        order = list(PostureLabel)
        hits = 0
        for pairs in by_session.values():
            votes = np.zeros(len(order))
            for _t, p in pairs:
                votes[order.index(p)] += 1
            majority = order[int(np.argmax(votes))]
            hits += int(majority == pairs[0][0])
        report.session_majority_accuracy = hits / len(by_session)

    if benchmark_latency:
        report.predict_latency_us = forest.benchmark_predict(model, X_test)
    return report, model


def channel_importances(model: RandomForestModel) -> dict[str, float]:
    """Gini importances aggregated over each channel's eight statistics."""
    imp = model.importances
    return {ch: float(imp[list(channel_indices(ch))].sum()) for ch in CHANNELS}


def distance_benchmark(
    distances: Sequence[float] = BENCHMARK_DISTANCES_M,
    conditions: Sequence[Condition] = tuple(Condition),
    n: int = 100,
    seed: int = 42,
    out_dir=None,
) -> dict[tuple[float, Condition], dict[str, float]]:
    """Ranging error grid: n chirps per (distance, condition) cell.

    Cells hold the mean absolute error against the nominal distance and the
    standard deviation of the estimates. Optionally writes the CSV table and
    an SVG bar chart under out_dir.
    """
    template = generate_chirp(DEFAULT_CHIRP)
    cfg = calibrated_ranging_config(template)
    participant = ParticipantModel(id=0, rng_seed=derive_seed(seed, "bench"))

    results: dict[tuple[float, Condition], dict[str, float]] = {}
    for dist in distances:
        profile = PostureProfile(
            label=PostureLabel.NEUTRAL, pitch_mean_deg=-2.0, pitch_jitter_deg=0.0,
            displacement_amp_m=0.0, screen_distance_m=dist, distance_jitter_m=0.0,
        )
        for condition in conditions:
            scene = scene_for_condition(condition)
            estimates = []
            for k in range(n):
                ts = k * 0.5
                mic1, mic2, _truth = synth_capture(
                    profile, participant, scene, template,
                    DEFAULT_PIPELINE_DELAY_S, timestamp_s=ts,
                    seed=derive_seed(seed, "bench", condition.name, int(dist * 1000), k),
                )
                est = range_dual(mic1, mic2, template, cfg, ts)
                if est is not None:
                    estimates.append(0.5 * (est.distance1_m + est.distance2_m))
            values = np.array(estimates)
            results[(dist, condition)] = {
                "n": float(values.size),
                "mean_abs_error_m": float(np.mean(np.abs(values - dist))) if values.size else math.nan,
                "std_m": float(np.std(values)) if values.size else math.nan,
            }

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_distance_errors_csv(results, out_dir / "distance_errors.csv")
        distance_error_chart(results, out_dir / "distance_errors.svg")
    return results


# ---------------------------------------------------------------------------
# report files

def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_CSV_HEADER + "\n")
        fh.write(f"accuracy,,{report.accuracy:.6f}\n")
        fh.write(f"macro_f1,,{report.macro_f1:.6f}\n")
        if report.session_majority_accuracy is not None:
            fh.write(f"session_majority_accuracy,,{report.session_majority_accuracy:.6f}\n")
        if report.predict_latency_us is not None:
            fh.write(f"predict_latency_us_batch,,{report.predict_latency_us['batch_us']:.6f}\n")
            fh.write(f"predict_latency_us_single,,{report.predict_latency_us['single_us']:.6f}\n")
        for label, stats in report.per_class.items():
            for key in ("precision", "recall", "f1"):
                fh.write(f"{key},{label.value},{stats[key]:.6f}\n")


def write_confusion_csv(report: MetricsReport, path) -> None:
    order = list(PostureLabel)
    with open(path, "w", newline="") as fh:
        fh.write("true\\predicted," + ",".join(l.value for l in order) + "\n")
        for i, label in enumerate(order):
            row = ",".join(str(int(v)) for v in report.confusion[i])
            fh.write(f"{label.value},{row}\n")


def write_importances_csv(model: RandomForestModel, path) -> None:
    channels = channel_importances(model)
    with open(path, "w", newline="") as fh:
        fh.write("feature,description,importance\n")
        for name, desc, value in zip(FEATURE_NAMES, FEATURE_DESCRIPTIONS, model.importances):
            fh.write(f"{name},{desc},{value:.6f}\n")
        for ch, value in channels.items():
            fh.write(f"channel_{ch},aggregate,{value:.6f}\n")


def write_distance_errors_csv(results: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(DISTANCE_ERRORS_CSV_HEADER + "\n")
        for (dist, condition), cell in sorted(
            results.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
        ):
            fh.write(
                f"{dist:.2f},{condition.value},{int(cell['n'])},"
                f"{cell['mean_abs_error_m']:.6f},{cell['std_m']:.6f}\n"
            )


# ---------------------------------------------------------------------------
# charts (self-contained SVG)

def _bar_chart(path, groups: list[str], series: dict[str, list[float]],
               ylabel: str, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(groups))
    width = 0.8 / max(1, len(series))
    for i, (name, values) in enumerate(series.items()):
        ax.bar(x + (i - (len(series) - 1) / 2) * width, values, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(groups)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    ax.grid(axis="y", linewidth=0.4, alpha=0.6)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def modality_accuracy_chart(accuracies: dict[Modality, float], path) -> None:
    order = [Modality.IMU_ONLY, Modality.AUDIO_ONLY, Modality.FUSED]
    present = [m for m in order if m in accuracies]
    _bar_chart(
        path,
        [m.value for m in present],
        {"accuracy": [accuracies[m] for m in present]},
        "test accuracy",
        "Posture classification by sensing modality",
    )


def importance_chart(model: RandomForestModel, path) -> None:
    channels = channel_importances(model)
    _bar_chart(
        path, list(channels.keys()), {"importance": list(channels.values())},
        "aggregated Gini importance", "Feature importance by channel",
    )


def distance_error_chart(results: dict, path) -> None:
    dists = sorted({d for d, _ in results})
    conditions = [c for c in Condition if any((d, c) in results for d in dists)]
    series = {
        c.value: [results[(d, c)]["mean_abs_error_m"] * 1000.0 for d in dists]
        for c in conditions
    }
    _bar_chart(
        path, [f"{d:.2f} m" for d in dists], series,
        "mean absolute error (mm)", "Distance estimation error by condition",
    )
