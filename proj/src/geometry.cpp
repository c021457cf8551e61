#include "pslab/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace pslab {

bool box_is_valid(double x1, double y1, double x2, double y2) {
    if (!std::isfinite(x1) || !std::isfinite(y1) || !std::isfinite(x2) || !std::isfinite(y2))
        return false;
    if (x1 < 0.0 || y1 < 0.0 || x2 > 1.0 || y2 > 1.0) return false;
    return x1 < x2 && y1 < y2;
}

Box::Box(double x1_, double y1_, double x2_, double y2_) : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {
    if (!box_is_valid(x1, y1, x2, y2))
        throw std::invalid_argument("Box: coordinates must satisfy 0 <= x1 < x2 <= 1, 0 <= y1 < y2 <= 1");
}

namespace {

double intersection_area(const Box& a, const Box& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    return iw * ih;
}

}  // namespace

double iou(const Box& a, const Box& b) {
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    return inter / uni;
}

double giou(const Box& a, const Box& b) {
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    const double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
    const double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
    const double enclosing = cw * ch;
    return inter / uni - (enclosing - uni) / enclosing;
}

double box_loss(const Box& pred, const Box& gt) {
    const double l1 = std::abs(pred.x1 - gt.x1) + std::abs(pred.y1 - gt.y1) +
                      std::abs(pred.x2 - gt.x2) + std::abs(pred.y2 - gt.y2);
    return (1.0 - giou(pred, gt)) + l1;
}

CenterBox to_center(const Box& b) {
    return {0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2), b.width(), b.height()};
}

Box from_center(const CenterBox& c) {
    return Box(c.cx - 0.5 * c.w, c.cy - 0.5 * c.h, c.cx + 0.5 * c.w, c.cy + 0.5 * c.h);
}

}  // namespace pslab
