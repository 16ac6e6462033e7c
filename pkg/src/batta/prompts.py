"""Prompt geometry: points and axis-aligned boxes in image pixel coordinates.

Boxes are half-open, [x0, x1) x [y0, y1), with x = column and y = row.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float


@dataclass(frozen=True)
class BoxXYXY:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box: {(self.x0, self.y0, self.x1, self.y1)}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))


@dataclass(frozen=True)
class PromptSet:
    points: tuple[Point2D, ...] = field(default_factory=tuple)
    boxes: tuple[BoxXYXY, ...] = field(default_factory=tuple)

    def __post_init__(self):
        # tolerate lists at construction time
        object.__setattr__(self, "points", tuple(self.points))
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def __len__(self) -> int:
        return len(self.points) + len(self.boxes)

    @property
    def empty(self) -> bool:
        return len(self) == 0

    def validate_bounds(self, image_hw: tuple[int, int]) -> None:
        """Raise ValueError if any prompt falls outside an image of shape (H, W)."""
        h, w = image_hw
        for p in self.points:
            if not (0 <= p.x < w and 0 <= p.y < h):
                raise ValueError(f"point {(p.x, p.y)} outside image {h}x{w}")
        for b in self.boxes:
            if not (0 <= b.x0 and b.x1 <= w and 0 <= b.y0 and b.y1 <= h):
                raise ValueError(
                    f"box {(b.x0, b.y0, b.x1, b.y1)} outside image {h}x{w}"
                )
