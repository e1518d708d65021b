"""Evaluation and model comparison statistics.

Last-step accuracy, per-sample correctness extraction, pairwise
McNemar tests with Benjamini-Hochberg FDR control, and the softmax
time-course analysis (corrected vs reverted initial guesses).
"""

import csv
import json
import math
import os
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import network
from .training import loss_time_summed, one_hot  # noqa: F401  (re-export convenience)


class DatasetMismatchError(ValueError):
    """Correctness vectors were produced on different datasets."""


def evaluate(spec, params, x, labels, batch_size=500):
    """Deterministic inference pass over a test set.

    Returns (correct, probs): per-sample last-step correctness flags and
    the full per-step softmax outputs with shape (n, tau, classes).
    """
    n = len(x)
    probs = np.empty((n, spec.tau, spec.classes), dtype=np.float32)
    for i in range(0, n, batch_size):
        trace = network.forward_unrolled(spec, params, x[i:i + batch_size], training=False)
        for t in range(spec.tau):
            probs[i:i + batch_size, t] = trace.softmax_out[t]
    correct = probs[:, -1].argmax(axis=1) == labels
    return correct, probs


# --- eval output files ----------------------------------------------------
#
# correctness.bin / labels.bin: records of [sample id u32][value f32]
# probs.bin:                    records of [sample id u32][tau * classes f32]
# manifest.txt names the model, dataset checksum and shapes.

def write_eval_output(out_dir, model_name, dataset_checksum, correct, labels, probs=None):
    os.makedirs(out_dir, exist_ok=True)
    n = len(correct)
    ids = np.arange(n, dtype="<u4")

    def write_rows(path, values):
        values = np.asarray(values, dtype="<f4").reshape(n, -1)
        rec = np.dtype([("id", "<u4"), ("row", "<f4", (values.shape[1],))])
        arr = np.zeros(n, dtype=rec)
        arr["id"] = ids
        arr["row"] = values
        with open(path, "wb") as fh:
            fh.write(arr.tobytes())

    write_rows(os.path.join(out_dir, "correctness.bin"), correct.astype(np.float32))
    write_rows(os.path.join(out_dir, "labels.bin"), labels.astype(np.float32))
    manifest = {
        "model": model_name,
        "dataset_checksum": dataset_checksum,
        "n": n,
        "accuracy": float(correct.mean()),
        "tau": 0,
        "classes": 0,
    }
    if probs is not None:
        manifest["tau"], manifest["classes"] = probs.shape[1], probs.shape[2]
        write_rows(os.path.join(out_dir, "probs.bin"), probs.reshape(n, -1))
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        for k, v in manifest.items():
            fh.write(f"{k}={v}\n")


def read_eval_output(eval_dir):
    manifest = {}
    with open(os.path.join(eval_dir, "manifest.txt")) as fh:
        for line in fh:
            k, _, v = line.strip().partition("=")
            manifest[k] = v
    n = int(manifest["n"])
    tau, classes = int(manifest["tau"]), int(manifest["classes"])

    def read_rows(path, width):
        rec = np.dtype([("id", "<u4"), ("row", "<f4", (width,))])
        with open(path, "rb") as fh:
            arr = np.frombuffer(fh.read(), dtype=rec)
        if len(arr) != n or not np.array_equal(arr["id"], np.arange(n)):
            raise ValueError(f"{path}: corrupt or misordered records")
        return arr["row"]

    out = {
        "model": manifest["model"],
        "dataset_checksum": manifest["dataset_checksum"],
        "accuracy": float(manifest["accuracy"]),
        "correct": read_rows(os.path.join(eval_dir, "correctness.bin"), 1)[:, 0] > 0.5,
        "labels": read_rows(os.path.join(eval_dir, "labels.bin"), 1)[:, 0].astype(np.int64),
    }
    probs_path = os.path.join(eval_dir, "probs.bin")
    if tau and os.path.exists(probs_path):
        out["probs"] = read_rows(probs_path, tau * classes).reshape(n, tau, classes)
    return out


# --- paired tests ---------------------------------------------------------

@dataclass
class McNemarResult:
    model_a: str
    model_b: str
    b: int          # a correct, b wrong
    c: int          # a wrong, b correct
    chi2: float
    p: float


def chi2_sf_1df(x):
    """Survival function of chi-square with 1 degree of freedom."""
    if x < 0:
        raise ValueError("chi-square statistic must be non-negative")
    return math.erfc(math.sqrt(x / 2.0))


def mcnemar(a, b, name_a="a", name_b="b", exact=False):
    """Continuity-corrected McNemar test on two aligned correctness vectors.

    With exact=True (recommended for b + c < 25) the p-value comes from
    the two-sided binomial test on the discordant pairs instead of the
    chi-square approximation.
    """
    a = np.asarray(a, dtype=bool)
    b_vec = np.asarray(b, dtype=bool)
    if a.shape != b_vec.shape:
        raise ValueError(f"correctness vectors disagree in length: {a.shape} vs {b_vec.shape}")
    nb = int((a & ~b_vec).sum())
    nc = int((~a & b_vec).sum())
    if nb + nc == 0:
        return McNemarResult(name_a, name_b, 0, 0, 0.0, 1.0)
    chi2 = (abs(nb - nc) - 1) ** 2 / (nb + nc)
    if exact:
        n = nb + nc
        k = min(nb, nc)
        p = min(1.0, 2.0 * sum(math.comb(n, i) for i in range(k + 1)) / 2.0 ** n)
    else:
        p = chi2_sf_1df(chi2)
    return McNemarResult(name_a, name_b, nb, nc, chi2, p)


@dataclass
class FdrReport:
    pvalues: np.ndarray         # original order
    sorted_pvalues: np.ndarray
    reject: np.ndarray          # original order
    critical_index: int         # largest k (1-based) passing the step-up rule, 0 if none
    q: float


def benjamini_hochberg(pvalues, q=0.05):
    """Step-up FDR control: reject every p <= p_(k) where k is the largest
    rank with p_(k) <= (k/m) q. Ties at the critical rank are all rejected."""
    p = np.asarray(pvalues, dtype=float)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("p-values must lie in [0, 1]")
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    m = p.size
    order = np.sort(p)
    thresh = (np.arange(1, m + 1) / m) * q
    passing = np.nonzero(order <= thresh)[0]
    if passing.size == 0:
        return FdrReport(p, order, np.zeros(m, dtype=bool), 0, q)
    k = int(passing[-1]) + 1
    return FdrReport(p, order, p <= order[k - 1], k, q)


# --- comparison report ----------------------------------------------------

def compare(evals, q=0.05, exact=False):
    """Pairwise McNemar matrix over >= 2 eval outputs plus BH rejections.

    evals: list of dicts from read_eval_output. All must share the same
    dataset checksum and sample count.
    """
    if len(evals) < 2:
        raise ValueError("need at least two models to compare")
    checksums = {e["dataset_checksum"] for e in evals}
    if len(checksums) != 1:
        raise DatasetMismatchError(f"dataset checksums differ: {sorted(checksums)}")
    results = [
        mcnemar(ea["correct"], eb["correct"], ea["model"], eb["model"], exact=exact)
        for ea, eb in combinations(evals, 2)
    ]
    fdr = benjamini_hochberg([r.p for r in results], q)
    rows = [
        {"model_a": r.model_a, "model_b": r.model_b, "b": r.b, "c": r.c,
         "chi2": r.chi2, "p": r.p, "reject_at_fdr05": bool(rej)}
        for r, rej in zip(results, fdr.reject)
    ]
    summary = {
        "q": q,
        "n": int(len(evals[0]["correct"])),
        "dataset_checksum": evals[0]["dataset_checksum"],
        "models": {e["model"]: {"accuracy": e["accuracy"],
                                "error": 1.0 - e["accuracy"]} for e in evals},
        "critical_index": fdr.critical_index,
        "pairs": rows,
    }
    return rows, summary


def write_compare_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["model_a", "model_b", "b", "c", "chi2", "p", "reject_at_fdr05"])
        writer.writeheader()
        writer.writerows(rows)


def write_compare_json(path, summary):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2)


# --- softmax time-course --------------------------------------------------

@dataclass
class TimecourseReport:
    n: int
    counts: dict                    # the five trajectory classes
    corrected_over_all: float
    corrected_over_initially_wrong: float
    reverted_over_all: float
    reverted_over_initially_correct: float
    exemplar_ids: np.ndarray        # most confidence-changing samples
    single_step: bool               # feedforward dump with tau == 1


def timecourse(probs, labels, top_k=16):
    """Classify per-sample argmax trajectories over the unrolled steps.

    probs: (n, tau, classes); labels: (n,). The two normalizations of
    the corrected/reverted fractions (over all stimuli, and over the
    initially wrong / initially correct subsets) are both reported.
    """
    probs = np.asarray(probs)
    n, tau, _ = probs.shape
    labels = np.asarray(labels)
    correct = probs.argmax(axis=2) == labels[:, None]    # (n, tau)
    c0, clast = correct[:, 0], correct[:, -1]
    if tau == 1:
        counts = {"stable_correct": int(c0.sum()), "stable_wrong": int((~c0).sum()),
                  "corrected": 0, "reverted": 0, "other": 0}
        return TimecourseReport(n, counts, 0.0, 0.0, 0.0, 0.0,
                                np.empty(0, dtype=np.int64), True)
    corrected = ~c0 & clast
    reverted = c0 & ~clast
    stable_correct = correct.all(axis=1)
    stable_wrong = (~correct).all(axis=1)
    other = ~(corrected | reverted | stable_correct | stable_wrong)
    counts = {
        "stable_correct": int(stable_correct.sum()),
        "stable_wrong": int(stable_wrong.sum()),
        "corrected": int(corrected.sum()),
        "reverted": int(reverted.sum()),
        "other": int(other.sum()),
    }
    n_wrong0 = int((~c0).sum())
    n_right0 = int(c0.sum())
    p_label = probs[np.arange(n), :, labels]             # (n, tau)
    change = np.abs(p_label[:, -1] - p_label[:, 0])
    exemplars = np.argsort(-change, kind="stable")[:top_k]
    return TimecourseReport(
        n=n, counts=counts,
        corrected_over_all=counts["corrected"] / n,
        corrected_over_initially_wrong=counts["corrected"] / n_wrong0 if n_wrong0 else 0.0,
        reverted_over_all=counts["reverted"] / n,
        reverted_over_initially_correct=counts["reverted"] / n_right0 if n_right0 else 0.0,
        exemplar_ids=exemplars, single_step=False)


def write_timecourse_csv(path, report, probs, labels):
    """Per-step probability traces of the exemplar samples (K * tau rows)."""
    classes = probs.shape[2]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "t", "label", "argmax"]
                        + [f"p{c}" for c in range(classes)])
        for i in report.exemplar_ids:
            for t in range(probs.shape[1]):
                writer.writerow([int(i), t, int(labels[i]), int(probs[i, t].argmax())]
                                + [f"{v:.6f}" for v in probs[i, t]])
