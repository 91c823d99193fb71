#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "arcp/tensor.hpp"
#include "arcp/trajectory.hpp"

namespace arcp {

// Point estimate of one predicted state; yaw in degrees.
struct PointState {
    double x = 0.0;
    double y = 0.0;
    double v = 0.0;
    double yaw_deg = 0.0;
};

// [agent][timestep], aligned with the target batch rows
using PointTrajectories = std::vector<std::vector<PointState>>;

struct TrajectoryScore {
    double ade = 0.0;          // meters
    double fde = 0.0;          // meters
    double orientation = 0.0;  // degrees
    double velocity = 0.0;     // m/s
    std::int64_t points = 0;   // masked-in (agent, t) pairs
};

namespace detail {

inline double gt_yaw_deg(const MaskedBatch& gt, int i, int t) {
    return 2.0 * std::atan2(gt.features.at(i, t, 4), gt.features.at(i, t, 3)) * 180.0 / M_PI;
}

inline void check_point_shapes(const PointTrajectories& pred, const MaskedBatch& gt) {
    if (static_cast<int>(pred.size()) < gt.active_agents())
        throw std::invalid_argument("metrics: prediction has fewer agent rows than the target");
    for (int i = 0; i < gt.active_agents(); ++i)
        if (static_cast<int>(pred[static_cast<std::size_t>(i)].size()) != gt.t_len())
            throw std::invalid_argument("metrics: prediction horizon does not match the target");
}

}  // namespace detail

// Absolute angular difference wrapped into [0, 180] degrees.
inline double wrap_angle_deg(double delta) {
    double d = std::fmod(std::abs(delta), 360.0);
    return d > 180.0 ? 360.0 - d : d;
}

// Mean Euclidean distance over masked-in (agent, t) pairs.
inline double ade(const PointTrajectories& pred, const MaskedBatch& gt) {
    detail::check_point_shapes(pred, gt);
    double total = 0.0;
    std::int64_t count = 0;
    for (int i = 0; i < gt.active_agents(); ++i)
        for (int t = 0; t < gt.t_len(); ++t) {
            if (gt.mask.at(i, t) == 0.0) continue;
            const double dx = pred[i][t].x - gt.features.at(i, t, 0);
            const double dy = pred[i][t].y - gt.features.at(i, t, 1);
            total += std::sqrt(dx * dx + dy * dy);
            ++count;
        }
    if (count == 0) throw std::invalid_argument("ade: no masked-in points");
    return total / static_cast<double>(count);
}

// Mean over agents of the displacement at each agent's last masked-in step.
inline double fde(const PointTrajectories& pred, const MaskedBatch& gt) {
    detail::check_point_shapes(pred, gt);
    double total = 0.0;
    int agents = 0;
    for (int i = 0; i < gt.active_agents(); ++i) {
        int last = -1;
        for (int t = 0; t < gt.t_len(); ++t)
            if (gt.mask.at(i, t) != 0.0) last = t;
        if (last < 0) continue;
        const double dx = pred[i][last].x - gt.features.at(i, last, 0);
        const double dy = pred[i][last].y - gt.features.at(i, last, 1);
        total += std::sqrt(dx * dx + dy * dy);
        ++agents;
    }
    if (agents == 0) throw std::invalid_argument("fde: no agents with masked-in points");
    return total / static_cast<double>(agents);
}

// (mean |yaw error| wrapped to [0, 180] degrees, mean |speed error|).
inline std::pair<double, double> orientation_velocity_error(const PointTrajectories& pred,
                                                            const MaskedBatch& gt) {
    detail::check_point_shapes(pred, gt);
    double ang = 0.0, vel = 0.0;
    std::int64_t count = 0;
    for (int i = 0; i < gt.active_agents(); ++i)
        for (int t = 0; t < gt.t_len(); ++t) {
            if (gt.mask.at(i, t) == 0.0) continue;
            ang += wrap_angle_deg(pred[i][t].yaw_deg - detail::gt_yaw_deg(gt, i, t));
            vel += std::abs(pred[i][t].v - gt.features.at(i, t, 2));
            ++count;
        }
    if (count == 0) throw std::invalid_argument("orientation_velocity_error: no masked-in points");
    return {ang / static_cast<double>(count), vel / static_cast<double>(count)};
}

inline TrajectoryScore score_trajectories(const PointTrajectories& pred, const MaskedBatch& gt) {
    TrajectoryScore s;
    s.ade = ade(pred, gt);
    s.fde = fde(pred, gt);
    auto [o, v] = orientation_velocity_error(pred, gt);
    s.orientation = o;
    s.velocity = v;
    for (int i = 0; i < gt.active_agents(); ++i)
        for (int t = 0; t < gt.t_len(); ++t)
            if (gt.mask.at(i, t) != 0.0) ++s.points;
    return s;
}

// ----- classification ---------------------------------------------------------

// Confusion matrix rows are predictions, columns are groundtruth.
struct ClassificationReport {
    double accuracy = 0.0;
    std::vector<double> precision;  // per class, TP/(TP+FP), 0 when undefined
    std::vector<double> recall;     // per class, TP/(TP+FN), 0 when undefined
    Tensor confusion;               // [K x K]
};

inline ClassificationReport classification_report(const std::vector<int>& pred,
                                                  const std::vector<int>& gt, int classes) {
    if (pred.size() != gt.size()) throw std::invalid_argument("classification_report: size mismatch");
    if (pred.empty()) throw std::invalid_argument("classification_report: empty input");
    ClassificationReport r;
    r.confusion = Tensor::zeros({classes, classes});
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] < 0 || pred[i] >= classes || gt[i] < 0 || gt[i] >= classes)
            throw std::invalid_argument("classification_report: label out of range");
        r.confusion.at(pred[i], gt[i]) += 1.0;
        if (pred[i] == gt[i]) ++correct;
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
    r.precision.assign(static_cast<std::size_t>(classes), 0.0);
    r.recall.assign(static_cast<std::size_t>(classes), 0.0);
    for (int c = 0; c < classes; ++c) {
        double tp = r.confusion.at(c, c), row = 0.0, col = 0.0;
        for (int j = 0; j < classes; ++j) {
            row += r.confusion.at(c, j);
            col += r.confusion.at(j, c);
        }
        r.precision[c] = row > 0.0 ? tp / row : 0.0;
        r.recall[c] = col > 0.0 ? tp / col : 0.0;
    }
    return r;
}

// ----- precision-recall curve ---------------------------------------------------

struct PrPoint {
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

// One point per distinct score threshold, descending; predictions are
// positive when score >= threshold.
inline std::vector<PrPoint> pr_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("pr_curve: size mismatch");
    if (scores.empty()) throw std::invalid_argument("pr_curve: empty input");
    for (double s : scores)
        if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("pr_curve: scores must be in [0, 1]");

    std::int64_t positives = 0;
    for (int l : labels) positives += l != 0 ? 1 : 0;

    std::vector<double> thresholds = scores;
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

    std::vector<PrPoint> curve;
    curve.reserve(thresholds.size());
    for (double th : thresholds) {
        std::int64_t tp = 0, fp = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] >= th) {
                if (labels[i] != 0) ++tp;
                else ++fp;
            }
        }
        PrPoint p;
        p.threshold = th;
        p.precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 1.0;
        p.recall = positives > 0 ? static_cast<double>(tp) / static_cast<double>(positives) : 0.0;
        curve.push_back(p);
    }
    return curve;
}

}  // namespace arcp
