"""
MLaaS federation engine.

Qt view: training curves drawn off-screen to PNG files.

Created by Matua Doc.
Created on 2026-10-19.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path

# Charts are drawn without a display.
os.environ.setdefault("QT_QPA_PLATFORM", "offscreen")

from PySide6.QtCharts import (QChart, QChartView, QLineSeries,  # noqa: E402
                              QValueAxis)
from PySide6.QtCore import QPointF, Qt  # noqa: E402
from PySide6.QtGui import QColor, QImage, QPainter  # noqa: E402
from PySide6.QtWidgets import QApplication  # noqa: E402

_application: QApplication | None = None


def ensure_application() -> QApplication:
    """Return the running Qt application, creating one if needed."""
    global _application
    existing = QApplication.instance()
    if existing is not None:
        return existing
    _application = QApplication([])
    return _application


def _padded_range(values: list[float]) -> tuple[float, float]:
    """Return the span of the values, widened if it is a single point."""
    low, high = min(values), max(values)
    if high - low < 1e-12:
        pad = max(abs(low) * 0.1, 0.5)
        return low - pad, high + pad
    pad = (high - low) * 0.05
    return low - pad, high + pad


@dataclass
class Series:
    """One labelled line."""

    label: str
    xs: list[float]
    ys: list[float]


@dataclass
class LineChart:
    """A line chart with value axes and a legend."""

    title: str
    x_label: str
    y_label: str
    width: int = 640
    height: int = 400
    series: list[Series] = field(default_factory=list)

    def add_series(self, label: str, xs: list[float],
                   ys: list[float]) -> None:
        """Add a line to the chart."""
        if len(xs) != len(ys):
            raise ValueError("A series needs as many x as y values")
        self.series.append(Series(label, list(xs), list(ys)))

    def build_chart(self) -> QChart:
        """Return a QChart holding every series on shared axes."""
        ensure_application()
        chart = QChart()
        chart.setTitle(self.title)
        chart.setAnimationOptions(QChart.AnimationOption.NoAnimation)
        chart.legend().setAlignment(Qt.AlignmentFlag.AlignBottom)

        x_axis = QValueAxis()
        x_axis.setTitleText(self.x_label)
        x_axis.setLabelFormat("%.0f")
        y_axis = QValueAxis()
        y_axis.setTitleText(self.y_label)
        y_axis.setLabelFormat("%.3f")
        chart.addAxis(x_axis, Qt.AlignmentFlag.AlignBottom)
        chart.addAxis(y_axis, Qt.AlignmentFlag.AlignLeft)

        for line in self.series:
            series = QLineSeries()
            series.setName(line.label)
            series.setPointsVisible(True)
            series.append([QPointF(x, y) for x, y in zip(line.xs, line.ys)])
            chart.addSeries(series)
            series.attachAxis(x_axis)
            series.attachAxis(y_axis)

        x_axis.setRange(*_padded_range(
            [x for line in self.series for x in line.xs] or [0.0]))
        y_axis.setRange(*_padded_range(
            [y for line in self.series for y in line.ys] or [0.0]))
        return chart

    def render(self) -> QImage:
        """Draw the chart onto a new image."""
        view = QChartView(self.build_chart())
        view.setRenderHint(QPainter.RenderHint.Antialiasing)
        view.resize(self.width, self.height)

        image = QImage(self.width, self.height, QImage.Format.Format_ARGB32)
        image.fill(QColor("white"))
        painter = QPainter(image)
        try:
            view.render(painter)
        finally:
            painter.end()
        return image

    def save(self, path: Path) -> Path:
        """Render the chart and write it as a PNG file."""
        path.parent.mkdir(parents=True, exist_ok=True)
        if not self.render().save(str(path), "PNG"):
            raise OSError(f"Could not write {path}")
        return path
