"""Run-directory layout, manifests, and report rendering.

A run directory is self-contained: endpoint copies, `frame_{k:03}.png` files,
`latents.npz` with the latent path, and a `run.json` whose "manifest" subtree
is fully deterministic (timings live in a separate "timing" field so that
repeated runs with identical inputs and seeds hash identically).

Report paths render matplotlib figures next to the delimited output: the run
command writes a contact sheet, eval writes a per-frame score figure beside
metrics.json/CSV, and the frequency analysis writes a band-profile figure
beside its CSV.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import matplotlib
import numpy as np
from PIL import Image

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import __version__
from .analysis import BandProfile
from .engine import MorphConfig, MorphSequence
from .metrics import MetricReport

MANIFEST_SCHEMA = 1
_PNG_METADATA = {"Software": None}  # keep figure bytes reproducible


def save_image(image: np.ndarray, path) -> None:
    """Write a [0,1] float image as 16-bit grayscale PNG.

    16 bits keep small injection/ablation differences representable at the
    file level (the 8-bit step would swallow them).
    """
    data = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(data * 65535.0).astype(np.uint16)).save(path)


def load_image(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read an image as grayscale [0,1] floats, optionally resizing to (H, W)."""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    if size is not None and arr.shape != size:
        resized = Image.fromarray(arr.astype(np.float32), mode="F").resize(
            (size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(resized, dtype=np.float64)
    return np.clip(arr, 0.0, 1.0)


def sha256_of_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_to_dict(config: MorphConfig) -> dict:
    data = asdict(config)
    for key in ("d_gate", "m_gate", "u_gate"):
        data[key] = list(data[key])
    return data


def config_from_dict(data: dict) -> MorphConfig:
    kwargs = dict(data)
    for key in ("d_gate", "m_gate", "u_gate"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return MorphConfig(**kwargs)


def write_run_dir(seq: MorphSequence, out_dir, input_a, input_b,
                  triplet_source: str = "none", contact_sheet: bool = True) -> Path:
    """Persist a morph sequence: frames, endpoint copies, manifest, latents."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    frame_files = []
    for k, frame in enumerate(seq.frames):
        name = f"frame_{k:03}.png"
        save_image(frame, out / name)
        frame_files.append({"file": name, "sha256": sha256_of_file(out / name)})

    endpoint_a = load_image(input_a)
    endpoint_b = load_image(input_b)
    save_image(endpoint_a, out / "endpoint_a.png")
    save_image(endpoint_b, out / "endpoint_b.png")
    np.savez_compressed(out / "latents.npz", latent_path=seq.latent_path)

    manifest = {
        "config": config_to_dict(seq.config),
        "inputs": {
            "a": {"path": str(input_a), "sha256": sha256_of_file(input_a)},
            "b": {"path": str(input_b), "sha256": sha256_of_file(input_b)},
        },
        "prompt_triplet": {**seq.triplet.texts(), "source": triplet_source},
        "alphas": list(seq.alphas.alphas),
        "endpoints": {"a": "endpoint_a.png", "b": "endpoint_b.png"},
        "frames": frame_files,
        "versions": {"morphkit": __version__, "numpy": np.__version__},
    }
    run_doc = {"schema": MANIFEST_SCHEMA, "manifest": manifest,
               "timing": dict(seq.timing)}
    (out / "run.json").write_text(json.dumps(run_doc, indent=2) + "\n")

    if contact_sheet:
        write_contact_sheet(seq, endpoint_a, endpoint_b, out / "contact_sheet.png")
    return out / "run.json"


def manifest_digest(run_json_path) -> str:
    """Hash of the deterministic manifest subtree (timing excluded)."""
    doc = json.loads(Path(run_json_path).read_text())
    blob = json.dumps(doc["manifest"], sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def load_run_dir(seq_dir):
    """Read a stored sequence directory back for evaluation.

    With a run.json the manifest is authoritative; otherwise endpoint_a.png,
    endpoint_b.png, and lexicographically ordered frame_*.png are expected.
    Returns (image_a, image_b, frames, latent_path_or_None).
    """
    seq_dir = Path(seq_dir)
    manifest_path = seq_dir / "run.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())["manifest"]
        endpoint_a = seq_dir / manifest["endpoints"]["a"]
        endpoint_b = seq_dir / manifest["endpoints"]["b"]
        frame_paths = [seq_dir / item["file"] for item in manifest["frames"]]
    else:
        endpoint_a = seq_dir / "endpoint_a.png"
        endpoint_b = seq_dir / "endpoint_b.png"
        frame_paths = sorted(seq_dir.glob("frame_*.png"))
    for path in (endpoint_a, endpoint_b):
        if not path.exists():
            raise FileNotFoundError(f"missing endpoint image {path}")
    if not frame_paths:
        raise FileNotFoundError(f"no frames found in {seq_dir}")
    image_a = load_image(endpoint_a)
    image_b = load_image(endpoint_b)
    frames = [load_image(p) for p in frame_paths]
    latents_path = seq_dir / "latents.npz"
    latent_path = None
    if latents_path.exists():
        with np.load(latents_path) as data:
            latent_path = data["latent_path"]
    return image_a, image_b, frames, latent_path


# -- figures and delimited output ---------------------------------------------


def write_contact_sheet(seq: MorphSequence, endpoint_a: np.ndarray,
                        endpoint_b: np.ndarray, path) -> None:
    """One-row grid: endpoint A, the K frames (labeled by alpha), endpoint B."""
    panels = [("A", endpoint_a)]
    panels += [(f"a={alpha:.3f}", frame)
               for alpha, frame in zip(seq.alphas.alphas, seq.frames)]
    panels.append(("B", endpoint_b))
    fig, axes = plt.subplots(1, len(panels), figsize=(1.6 * len(panels), 2.0))
    for ax, (label, image) in zip(np.atleast_1d(axes), panels):
        ax.imshow(image, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_title(label, fontsize=8)
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def write_metrics_json(report: MetricReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def write_metrics_csv(report: MetricReport, alphas, path) -> None:
    """Per-frame score table (one row per frame) for external plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "alpha", "g", "g_sharpened", "l"])
        for k, alpha in enumerate(alphas):
            writer.writerow([k, f"{alpha:.10g}",
                             f"{report.g_per_frame[k]:.10g}",
                             f"{report.g_sharpened[k]:.10g}",
                             f"{report.l_per_frame[k]:.10g}"])


def write_metrics_figure(report: MetricReport, alphas, path) -> None:
    """Per-frame global/local consistency curves with the aggregate scores."""
    ks = np.arange(len(alphas))
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(ks, report.g_per_frame, "o-", label="global term g_k")
    ax.plot(ks, report.l_per_frame, "s-", label="local term l_k")
    ax.set_xlabel("frame index k")
    ax.set_ylabel("consistency term")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(f"GCS={report.gcs:.4f}  LCS={report.lcs:.4f}  "
                 f"GLCS={report.glcs_display:.2f}")
    ax.legend(loc="lower center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def write_profile_csv(band_profile: BandProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position", "low", "high"])
        for position, low, high in band_profile.points:
            writer.writerow([position, f"{low:.10g}", f"{high:.10g}"])


def write_profile_figure(band_profile: BandProfile, path) -> None:
    positions = band_profile.positions()
    low = [p[1] for p in band_profile.points]
    high = [p[2] for p in band_profile.points]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(positions, low, "o-", label="low band")
    ax.plot(positions, high, "s-", label="high band")
    ax.set_xlabel(band_profile.axis)
    ax.set_ylabel("mean magnitude")
    ax.set_title(f"frequency bands by {band_profile.axis}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)
