"""Minimal self-contained SVG plots (line charts and grouped bars).

Curves are emitted as one <polyline> per series with one coordinate pair
per data point, which keeps the files trivially inspectable.
"""
from __future__ import annotations

from pathlib import Path

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 20, 36, 44
COLORS = ("#c0392b", "#2471a3", "#1e8449", "#8e44ad", "#b7950b", "#34495e")


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _axis_range(lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Canvas:
    def __init__(self, title, x_label, y_label, x_range, y_range):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="15" '
            f'font-family="sans-serif">{_escape(title)}</text>',
        ]
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        self._axes(x_label, y_label)

    def x(self, v: float) -> float:
        span = self.x1 - self.x0 or 1.0
        return MARGIN_L + (v - self.x0) / span * (WIDTH - MARGIN_L - MARGIN_R)

    def y(self, v: float) -> float:
        span = self.y1 - self.y0 or 1.0
        return HEIGHT - MARGIN_B - (v - self.y0) / span * (HEIGHT - MARGIN_T - MARGIN_B)

    def _axes(self, x_label, y_label):
        left, bottom = MARGIN_L, HEIGHT - MARGIN_B
        right, top = WIDTH - MARGIN_R, MARGIN_T
        self.parts.append(
            f'<polyline points="{left},{top} {left},{bottom} {right},{bottom}" '
            f'fill="none" stroke="black" stroke-width="1"/>'
        )
        for i in range(5):
            fx = self.x0 + (self.x1 - self.x0) * i / 4
            fy = self.y0 + (self.y1 - self.y0) * i / 4
            px, py = self.x(fx), self.y(fy)
            self.parts.append(
                f'<text x="{px:.1f}" y="{bottom + 16}" text-anchor="middle" '
                f'font-size="11" font-family="sans-serif">{fx:.3g}</text>'
            )
            self.parts.append(
                f'<text x="{left - 6}" y="{py + 4:.1f}" text-anchor="end" '
                f'font-size="11" font-family="sans-serif">{fy:.3g}</text>'
            )
        self.parts.append(
            f'<text x="{(left + right) / 2}" y="{HEIGHT - 8}" text-anchor="middle" '
            f'font-size="12" font-family="sans-serif">{_escape(x_label)}</text>'
        )
        self.parts.append(
            f'<text x="14" y="{(top + bottom) / 2}" text-anchor="middle" font-size="12" '
            f'font-family="sans-serif" transform="rotate(-90 14 {(top + bottom) / 2})">'
            f"{_escape(y_label)}</text>"
        )

    def legend(self, labels_colors):
        x = MARGIN_L + 10
        for i, (label, color) in enumerate(labels_colors):
            y = MARGIN_T + 14 + 16 * i
            self.parts.append(
                f'<rect x="{x}" y="{y - 9}" width="12" height="3" fill="{color}"/>'
            )
            self.parts.append(
                f'<text x="{x + 18}" y="{y - 4}" font-size="11" '
                f'font-family="sans-serif">{_escape(label)}</text>'
            )

    def to_svg(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_plot(path, series: dict, title: str, x_label: str = "round",
              y_label: str = "") -> None:
    """series maps label -> list of values (None entries are skipped)."""
    xs_all, ys_all = [], []
    for values in series.values():
        for i, v in enumerate(values):
            if v is not None:
                xs_all.append(i)
                ys_all.append(v)
    if not ys_all:
        xs_all, ys_all = [0], [0.0]
    canvas = _Canvas(title, x_label, y_label,
                     _axis_range(min(xs_all), max(xs_all)),
                     _axis_range(min(ys_all), max(ys_all)))
    legend = []
    for (label, values), color in zip(series.items(), COLORS):
        points = " ".join(
            f"{canvas.x(i):.2f},{canvas.y(v):.2f}"
            for i, v in enumerate(values)
            if v is not None
        )
        if points:
            canvas.parts.append(
                f'<polyline points="{points}" fill="none" stroke="{color}" '
                f'stroke-width="1.5"/>'
            )
        legend.append((label, color))
    canvas.legend(legend)
    Path(path).write_text(canvas.to_svg())


def bar_plot(path, bucket_labels, groups: dict, title: str,
             x_label: str = "", y_label: str = "") -> None:
    """groups maps label -> per-bucket values; bars are drawn side by side."""
    n_buckets = len(bucket_labels)
    top = max((max(v) if v else 0) for v in groups.values()) if groups else 1
    canvas = _Canvas(title, x_label, y_label, (0, max(n_buckets, 1)), _axis_range(0, top))
    band = (WIDTH - MARGIN_L - MARGIN_R) / max(n_buckets, 1)
    bar_w = band / (len(groups) + 1)
    legend = []
    for gi, ((label, values), color) in enumerate(zip(groups.items(), COLORS)):
        for bi, v in enumerate(values):
            x = MARGIN_L + bi * band + (gi + 0.5) * bar_w
            y = canvas.y(v)
            h = (HEIGHT - MARGIN_B) - y
            canvas.parts.append(
                f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w:.2f}" '
                f'height="{max(h, 0):.2f}" fill="{color}"/>'
            )
        legend.append((label, color))
    for bi, label in enumerate(bucket_labels):
        x = MARGIN_L + (bi + 0.5) * band
        canvas.parts.append(
            f'<text x="{x:.1f}" y="{HEIGHT - MARGIN_B + 16}" text-anchor="middle" '
            f'font-size="10" font-family="sans-serif">{_escape(str(label))}</text>'
        )
    canvas.legend(legend)
    Path(path).write_text(canvas.to_svg())


def accepted_count_buckets(series, bucket: int = 10):
    """Accepted benign/malicious totals per `bucket`-round window."""
    n = len(series.back_acc)
    labels, benign, malicious = [], [], []
    for start in range(0, n, bucket):
        end = min(start + bucket, n)
        labels.append(f"{start}-{end - 1}")
        benign.append(sum(series.accepted_benign[start:end]))
        malicious.append(sum(series.accepted_malicious[start:end]))
    return labels, benign, malicious


def write_run_plots(outdir, series) -> None:
    out = Path(outdir)
    line_plot(
        out / "accuracy.svg",
        {"backdoor accuracy": series.back_acc, "benign accuracy": series.ben_acc},
        "Accuracy per round",
        y_label="percent",
    )
    line_plot(
        out / "norms.svg",
        {
            "global update norm": series.global_update_norm,
            "region estimate": series.region_estimate,
        },
        "Update magnitudes",
        y_label="L2 norm",
    )
    labels, benign, malicious = accepted_count_buckets(series)
    bar_plot(
        out / "accepted.svg",
        labels,
        {"benign accepted": benign, "malicious accepted": malicious},
        "Accepted updates per 10-round bucket",
        x_label="rounds",
        y_label="count",
    )
