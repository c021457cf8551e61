#pragma once

#include <stdexcept>

namespace pslab {

// Axis-aligned box in normalized scene coordinates, corner format.
// Construction rejects degenerate or out-of-range boxes instead of clamping;
// generators are expected to hand over valid geometry.
struct Box {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

    Box() = default;
    Box(double x1_, double y1_, double x2_, double y2_);

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
};

bool box_is_valid(double x1, double y1, double x2, double y2);

// Intersection over union, in [0, 1].
double iou(const Box& a, const Box& b);

// Generalized IoU, in (-1, 1]: iou minus the empty fraction of the smallest
// enclosing box. Equals iou exactly when the enclosing box area equals the
// union area.
double giou(const Box& a, const Box& b);

// Localization loss: (1 - giou) + L1 over the four corner coordinates.
// Zero iff the boxes are identical.
double box_loss(const Box& pred, const Box& gt);

// Center-format conversion, used only at data boundaries (e.g. the box head).
struct CenterBox {
    double cx, cy, w, h;
};
CenterBox to_center(const Box& b);
Box from_center(const CenterBox& c);

}  // namespace pslab
