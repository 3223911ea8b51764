"""CSV parsing and matplotlib figure construction."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

REQUIRED_COLUMNS = (
    "snr_db",
    "variant",
    "mse_theta_deg2",
    "crb_deg2",
    "mean_iterations",
    "n_trials",
    "failures",
)

VARIANT_LABELS = {
    "iml": "IML",
    "miml": "MIML",
    "uncal": "uncalibrated",
    "diag": "MIML (diagonal mask)",
}
FIG2_VARIANTS = ("miml", "diag")


class SchemaError(ValueError):
    """The CSV does not carry the sweep schema."""


@dataclass
class PlotSpec:
    """What to read, what to draw, where to write."""

    csv_path: str
    out_path: str = "fig.png"
    log_y: bool = True
    variants: tuple[str, ...] | None = None  # None: every variant in the file
    fig2: bool = False  # block-mask vs diagonal-mask comparison
    title: str | None = None


def load_rows(csv_path) -> list[dict]:
    """Parse the sweep CSV, failing loudly on schema mismatches."""
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise SchemaError(
                f"{csv_path}: missing column(s) {', '.join(missing)}; "
                f"expected {','.join(REQUIRED_COLUMNS)}"
            )
        rows = []
        for raw in reader:
            rows.append(
                {
                    "snr_db": float(raw["snr_db"]),
                    "variant": raw["variant"],
                    "mse_theta_deg2": float(raw["mse_theta_deg2"])
                    if raw["mse_theta_deg2"] != ""
                    else np.nan,
                    "crb_deg2": float(raw["crb_deg2"]),
                }
            )
    return rows


def _series(rows, variant):
    pts = sorted(
        ((r["snr_db"], r["mse_theta_deg2"]) for r in rows if r["variant"] == variant)
    )
    return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])


def build_figure(spec: PlotSpec):
    """Figure with one MSE curve per variant plus the dashed CRB curve."""
    rows = load_rows(spec.csv_path)
    variants = [v for v in dict.fromkeys(r["variant"] for r in rows)]
    if spec.fig2:
        variants = [v for v in variants if v in FIG2_VARIANTS]
    if spec.variants is not None:
        variants = [v for v in variants if v in spec.variants]

    fig, ax = plt.subplots(figsize=(7.0, 5.0))
    for variant in variants:
        snr, mse = _series(rows, variant)
        ax.plot(snr, mse, marker="o", linestyle="-",
                label=VARIANT_LABELS.get(variant, variant))
    crb_pts = sorted({(r["snr_db"], r["crb_deg2"]) for r in rows})
    if crb_pts:
        snr = np.array([p[0] for p in crb_pts])
        crb = np.array([p[1] for p in crb_pts])
        ax.plot(snr, crb, color="black", linestyle="--", label="CRB")
    if spec.log_y:
        ax.set_yscale("log")
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("MSE (deg$^2$)")
    ax.grid(True, which="both", alpha=0.3)
    if spec.title:
        ax.set_title(spec.title)
    elif spec.fig2:
        ax.set_title("Effect of the noise-covariance structure assumption")
    else:
        ax.set_title("DOA MSE vs SNR")
    if variants or crb_pts:
        ax.legend()
    fig.tight_layout()
    return fig, ax


def render(spec: PlotSpec) -> list[str]:
    """Write the figure; returns the written path(s).

    The Software metadata entry is dropped so rerenders of identical input are
    byte-identical under a fixed matplotlib version.
    """
    fig, _ = build_figure(spec)
    out = Path(spec.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    metadata = {"Software": None} if out.suffix.lower() == ".png" else None
    fig.savefig(out, dpi=150, metadata=metadata)
    plt.close(fig)
    return [str(out)]
