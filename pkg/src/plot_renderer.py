"""
Static scenario plots.
Draws lane centerlines, lane boundaries and agent trajectories to SVG or PNG with the
proposal pair highlighted.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from scenario import Lane, Scenario

logger = logging.getLogger(__name__)

Color = Tuple[int, int, int]


@dataclass
class PlotConfig:
    """Configuration class for plot styling"""

    pixels_per_meter: float = 8.0
    margin: int = 30
    max_size: int = 2000
    background: Color = (255, 255, 255)
    centerline_color: Color = (170, 170, 170)
    boundary_color: Color = (60, 60, 60)
    agent_color: Color = (120, 140, 200)
    pair_colors: Tuple[Color, Color] = ((220, 50, 50), (30, 150, 60))
    trajectory_width: int = 3
    highlight_width: int = 5
    marker_radius: int = 4
    labels: bool = True
    dash: Tuple[int, int] = (6, 4)


def lane_boundaries(lane: Lane) -> Tuple[np.ndarray, np.ndarray]:
    """Left and right boundary polylines offset by half the lane width"""
    points = lane.centerline
    tangents = np.gradient(points, axis=0)
    norms = np.linalg.norm(tangents, axis=1, keepdims=True)
    tangents = tangents / np.maximum(norms, 1e-12)
    normals = np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)
    half = lane.width / 2.0
    return points + half * normals, points - half * normals


class PlotRenderer:
    """Renders a scenario to a Pillow image"""

    def __init__(self, config: Optional[PlotConfig] = None):
        self.config = config or PlotConfig()

    def _bounds(self, scenario: Scenario) -> Tuple[np.ndarray, np.ndarray]:
        clouds = [traj.positions for traj in scenario.trajectories]
        for lane in scenario.map.lanes:
            clouds.extend(lane_boundaries(lane))
        points = np.concatenate(clouds, axis=0)
        return points.min(axis=0), points.max(axis=0)

    def _transform(self, scenario: Scenario):
        cfg = self.config
        low, high = self._bounds(scenario)
        span = np.maximum(high - low, 1.0)
        scale = min(cfg.pixels_per_meter, (cfg.max_size - 2 * cfg.margin) / float(span.max()))
        size = (int(span[0] * scale) + 2 * cfg.margin, int(span[1] * scale) + 2 * cfg.margin)

        def to_pixels(points: np.ndarray):
            points = np.asarray(points, dtype=float).reshape(-1, 2)
            x = cfg.margin + (points[:, 0] - low[0]) * scale
            # image y grows downward
            y = size[1] - cfg.margin - (points[:, 1] - low[1]) * scale
            return [(float(a), float(b)) for a, b in zip(x, y)]

        return size, to_pixels

    def _dashed(self, draw: ImageDraw.ImageDraw, pixels, color: Color):
        on, off = self.config.dash
        for start, end in zip(pixels[:-1], pixels[1:]):
            a, b = np.array(start), np.array(end)
            length = float(np.linalg.norm(b - a))
            if length == 0:
                continue
            direction = (b - a) / length
            pos = 0.0
            while pos < length:
                stop = min(pos + on, length)
                draw.line([tuple(a + direction * pos), tuple(a + direction * stop)], fill=color, width=1)
                pos += on + off

    def render(self, scenario: Scenario, pair: Sequence[str] = ()) -> Image.Image:
        cfg = self.config
        size, to_pixels = self._transform(scenario)
        image = Image.new('RGB', size, cfg.background)
        draw = ImageDraw.Draw(image)
        font = ImageFont.load_default()

        for lane in scenario.map.lanes:
            left, right = lane_boundaries(lane)
            draw.line(to_pixels(left), fill=cfg.boundary_color, width=2)
            draw.line(to_pixels(right), fill=cfg.boundary_color, width=2)
            self._dashed(draw, to_pixels(lane.centerline), cfg.centerline_color)

        highlight: Dict[str, Color] = {agent_id: color for agent_id, color in zip(pair, cfg.pair_colors)}
        # background agents first so the pair is drawn on top
        ordered = sorted(scenario.trajectories, key=lambda traj: traj.agent_id in highlight)
        for traj in ordered:
            color = highlight.get(traj.agent_id, cfg.agent_color)
            width = cfg.highlight_width if traj.agent_id in highlight else cfg.trajectory_width
            pixels = to_pixels(traj.positions)
            draw.line(pixels, fill=color, width=width, joint='curve')
            x, y = pixels[0]
            r = cfg.marker_radius
            draw.ellipse([x - r, y - r, x + r, y + r], outline=color, width=2)
            x, y = pixels[-1]
            draw.ellipse([x - r, y - r, x + r, y + r], fill=color)
            if cfg.labels:
                draw.text((x + r + 2, y - r - 2), traj.agent_id, fill=color, font=font)
        return image

    def render_svg(self, scenario: Scenario, pair: Sequence[str] = ()) -> str:
        """Same drawing as render(), as an SVG document"""
        cfg = self.config
        (width, height), to_pixels = self._transform(scenario)

        def points(pixels) -> str:
            return " ".join(f"{x:.2f},{y:.2f}" for x, y in pixels)

        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" '
                 f'width="{width}" height="{height}">',
                 f'<rect x="0" y="0" width="{width}" height="{height}" fill="{_hex(cfg.background)}"/>']
        dash = f"{cfg.dash[0]},{cfg.dash[1]}"
        for lane in scenario.map.lanes:
            for boundary in lane_boundaries(lane):
                parts.append(f'<polyline fill="none" stroke="{_hex(cfg.boundary_color)}" stroke-width="2" '
                             f'points="{points(to_pixels(boundary))}"/>')
            parts.append(f'<polyline fill="none" stroke="{_hex(cfg.centerline_color)}" stroke-width="1" '
                         f'stroke-dasharray="{dash}" points="{points(to_pixels(lane.centerline))}"/>')

        highlight = {agent_id: color for agent_id, color in zip(pair, cfg.pair_colors)}
        for traj in sorted(scenario.trajectories, key=lambda traj: traj.agent_id in highlight):
            color = _hex(highlight.get(traj.agent_id, cfg.agent_color))
            width_px = cfg.highlight_width if traj.agent_id in highlight else cfg.trajectory_width
            pixels = to_pixels(traj.positions)
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="{width_px}" '
                         f'stroke-linejoin="round" points="{points(pixels)}"/>')
            r = cfg.marker_radius
            (x0, y0), (x1, y1) = pixels[0], pixels[-1]
            parts.append(f'<circle cx="{x0:.2f}" cy="{y0:.2f}" r="{r}" fill="none" stroke="{color}" stroke-width="2"/>')
            parts.append(f'<circle cx="{x1:.2f}" cy="{y1:.2f}" r="{r}" fill="{color}"/>')
            if cfg.labels:
                parts.append(f'<text x="{x1 + r + 2:.2f}" y="{y1 - r - 2:.2f}" font-size="11" '
                             f'font-family="monospace" fill="{color}">{escape(traj.agent_id)}</text>')
        parts.append("</svg>")
        return "\n".join(parts)

    def save(self, scenario: Scenario, output_path: str, pair: Sequence[str] = ()) -> bool:
        """Write a plot; the format follows the extension (.svg, otherwise PNG)"""
        try:
            directory = os.path.dirname(output_path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            if output_path.lower().endswith(".svg"):
                with open(output_path, "w", encoding="utf-8") as f:
                    f.write(self.render_svg(scenario, pair) + "\n")
            else:
                self.render(scenario, pair).save(output_path, format='PNG', optimize=True)
            return True
        except OSError as e:
            logger.error("Error saving plot to %s: %s", output_path, e)
            return False


def _hex(color: Color) -> str:
    return "#{:02x}{:02x}{:02x}".format(*color)


def render_scenario(scenario: Scenario, output_path: str, pair: Sequence[str] = (),
                    config: Optional[PlotConfig] = None) -> bool:
    return PlotRenderer(config).save(scenario, output_path, pair)
