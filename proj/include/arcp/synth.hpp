#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "arcp/netpbm.hpp"
#include "arcp/rng.hpp"
#include "arcp/tensor.hpp"
#include "arcp/trajectory.hpp"

namespace arcp {

enum class TrafficLightState { Red = 0, Green = 1, Yellow = 2, Off = 3 };

inline const char* traffic_light_name(TrafficLightState s) {
    switch (s) {
        case TrafficLightState::Red: return "Red";
        case TrafficLightState::Green: return "Green";
        case TrafficLightState::Yellow: return "Yellow";
        case TrafficLightState::Off: return "Off";
    }
    return "?";
}

inline TrafficLightState traffic_light_from_name(const std::string& name) {
    if (name == "Red") return TrafficLightState::Red;
    if (name == "Green") return TrafficLightState::Green;
    if (name == "Yellow") return TrafficLightState::Yellow;
    if (name == "Off") return TrafficLightState::Off;
    throw std::invalid_argument("unknown traffic light state '" + name + "'");
}

enum class CrossingLabel { DontCross = 0, Cross = 1 };

// Social-forces dynamics: goal attraction relaxed over tau plus exponential
// pairwise repulsion, integrated with semi-implicit Euler.
struct SFParams {
    double desired_speed = 1.3;    // m/s
    double relaxation_time = 0.5;  // s
    double repulsion_a = 2.0;      // m/s^2
    double repulsion_b = 0.3;      // m
    double dt = 0.4;               // s per frame (2.5 fps)

    void validate() const {
        if (desired_speed <= 0 || relaxation_time <= 0 || repulsion_a < 0 || repulsion_b <= 0 || dt <= 0)
            throw std::invalid_argument("SFParams: fields must be positive");
    }
};

// Crossing corridor and signal phases used to label windows.
struct CrossingRule {
    double corridor_x0 = -1.0, corridor_y0 = -1.0;
    double corridor_x1 = 1.0, corridor_y1 = 1.0;
    double horizon = 4.8;  // seconds ahead of the decision point
    std::vector<std::pair<std::int64_t, TrafficLightState>> phases;  // (start frame, state)

    void validate() const {
        if (corridor_x1 <= corridor_x0 || corridor_y1 <= corridor_y0)
            throw std::invalid_argument("CrossingRule: corridor must have positive area");
        if (horizon <= 0) throw std::invalid_argument("CrossingRule: horizon must be positive");
        for (std::size_t i = 1; i < phases.size(); ++i)
            if (phases[i].first <= phases[i - 1].first)
                throw std::invalid_argument("CrossingRule: phase starts must increase");
    }

    bool inside_corridor(double x, double y) const {
        return x >= corridor_x0 && x <= corridor_x1 && y >= corridor_y0 && y <= corridor_y1;
    }

    // Signal state at a frame; Off before the first phase or with no schedule.
    TrafficLightState state_at(std::int64_t frame) const {
        TrafficLightState s = TrafficLightState::Off;
        for (const auto& [start, st] : phases) {
            if (frame >= start) s = st;
            else break;
        }
        return s;
    }

    bool signalized() const { return !phases.empty(); }
};

namespace detail {

inline AgentSample make_sample(std::int64_t frame, double x, double y, double vx, double vy,
                               double fallback_yaw) {
    AgentSample s;
    s.frame = frame;
    s.x = x;
    s.y = y;
    s.v = std::sqrt(vx * vx + vy * vy);
    const double yaw = s.v > 1e-9 ? std::atan2(vy, vx) : fallback_yaw;
    s.qw = std::cos(yaw / 2.0);
    s.qz = std::sin(yaw / 2.0);
    return s;
}

}  // namespace detail

struct SFAgentInit {
    double x, y;          // start position
    double goal_x, goal_y;
    double vx = 0, vy = 0;
};

// Integrates the social-forces model for explicitly placed agents. Speeds
// are clamped to twice the desired speed.
inline Scene simulate_social_forces(const std::vector<SFAgentInit>& inits, int steps,
                                    const SFParams& params) {
    params.validate();
    if (inits.empty()) throw std::invalid_argument("simulate_social_forces: need at least one agent");
    if (steps < 1) throw std::invalid_argument("simulate_social_forces: steps must be >= 1");
    const double contact_radius = 0.6;  // summed personal radii
    const double vmax = 2.0 * params.desired_speed;

    const std::size_t n = inits.size();
    std::vector<double> px(n), py(n), vx(n), vy(n), yaw(n);
    Scene scene;
    scene.frame_rate = 1.0 / params.dt;
    scene.tracks.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        px[i] = inits[i].x;
        py[i] = inits[i].y;
        vx[i] = inits[i].vx;
        vy[i] = inits[i].vy;
        yaw[i] = std::atan2(inits[i].goal_y - py[i], inits[i].goal_x - px[i]);
        scene.tracks[i].agent_id = static_cast<std::int64_t>(i);
        scene.tracks[i].samples.push_back(detail::make_sample(0, px[i], py[i], vx[i], vy[i], yaw[i]));
    }

    for (int step = 1; step < steps; ++step) {
        std::vector<double> fx(n, 0.0), fy(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double gx = inits[i].goal_x - px[i];
            double gy = inits[i].goal_y - py[i];
            const double gd = std::sqrt(gx * gx + gy * gy);
            if (gd > 1e-9) {
                gx /= gd;
                gy /= gd;
            } else {
                gx = gy = 0.0;
            }
            fx[i] += (params.desired_speed * gx - vx[i]) / params.relaxation_time;
            fy[i] += (params.desired_speed * gy - vy[i]) / params.relaxation_time;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double dx = px[i] - px[j];
                const double dy = py[i] - py[j];
                const double d = std::max(std::sqrt(dx * dx + dy * dy), 1e-6);
                const double mag = params.repulsion_a * std::exp((contact_radius - d) / params.repulsion_b);
                fx[i] += mag * dx / d;
                fy[i] += mag * dy / d;
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            vx[i] += params.dt * fx[i];
            vy[i] += params.dt * fy[i];
            const double speed = std::sqrt(vx[i] * vx[i] + vy[i] * vy[i]);
            if (speed > vmax) {
                vx[i] *= vmax / speed;
                vy[i] *= vmax / speed;
            }
            px[i] += params.dt * vx[i];
            py[i] += params.dt * vy[i];
            if (speed > 1e-9) yaw[i] = std::atan2(vy[i], vx[i]);
            scene.tracks[i].samples.push_back(
                detail::make_sample(step, px[i], py[i], vx[i], vy[i], yaw[i]));
        }
    }
    return scene;
}

// Seeded scene: agents spawn on a ring and walk to roughly antipodal goals,
// which makes their paths cross near the centre and forces interactions.
inline Scene gen_social_forces(int n_agents, int steps, const SFParams& params, std::uint64_t seed,
                               double ring_radius = 4.0) {
    if (n_agents < 1) throw std::invalid_argument("gen_social_forces: n_agents must be >= 1");
    Rng rng(seed);
    std::vector<SFAgentInit> inits;
    inits.reserve(static_cast<std::size_t>(n_agents));
    for (int i = 0; i < n_agents; ++i) {
        const double a = rng.uniform(0.0, 2.0 * M_PI);
        const double r = ring_radius * (0.8 + 0.2 * rng.uniform());
        SFAgentInit init;
        init.x = r * std::cos(a);
        init.y = r * std::sin(a);
        const double ga = a + M_PI + rng.uniform(-0.5, 0.5);
        init.goal_x = r * std::cos(ga);
        init.goal_y = r * std::sin(ga);
        // start part-way up to the desired speed, heading at the goal
        const double v0 = params.desired_speed * rng.uniform(0.3, 1.0);
        const double heading = std::atan2(init.goal_y - init.y, init.goal_x - init.x);
        init.vx = v0 * std::cos(heading);
        init.vy = v0 * std::sin(heading);
        inits.push_back(init);
    }
    return simulate_social_forces(inits, steps, params);
}

// Straight-line agents with per-agent speed drawn from [speed_lo, speed_hi].
inline Scene gen_constant_velocity(int n_agents, int steps, double speed_lo, double speed_hi,
                                   std::uint64_t seed, double dt = 0.4, double area = 4.0) {
    if (n_agents < 1) throw std::invalid_argument("gen_constant_velocity: n_agents must be >= 1");
    if (speed_lo < 0 || speed_hi < speed_lo)
        throw std::invalid_argument("gen_constant_velocity: bad speed range");
    Rng rng(seed);
    Scene scene;
    scene.frame_rate = 1.0 / dt;
    for (int i = 0; i < n_agents; ++i) {
        AgentTrack track;
        track.agent_id = i;
        const double x0 = rng.uniform(-area, area);
        const double y0 = rng.uniform(-area, area);
        const double speed = rng.uniform(speed_lo, speed_hi);
        const double heading = rng.uniform(0.0, 2.0 * M_PI);
        const double vx = speed * std::cos(heading);
        const double vy = speed * std::sin(heading);
        for (int step = 0; step < steps; ++step)
            track.samples.push_back(detail::make_sample(step, x0 + vx * dt * step, y0 + vy * dt * step,
                                                        vx, vy, heading));
        scene.tracks.push_back(std::move(track));
    }
    return scene;
}

// Per-window crossing label, aligned with window_scene(scene, spec): a window
// is Cross iff the signal (when present) shows Green over the whole window
// span and no ground-truth sample lies inside the corridor between the
// decision point (end of observation) and the horizon.
struct WindowCrossingLabel {
    std::int64_t start_frame = 0;
    CrossingLabel label = CrossingLabel::DontCross;
    TrafficLightState signal_at_decision = TrafficLightState::Off;
};

inline std::vector<WindowCrossingLabel> label_crossing(const Scene& scene, const CrossingRule& rule,
                                                       const WindowSpec& spec) {
    rule.validate();
    spec.validate();
    const std::int64_t horizon_frames =
        static_cast<std::int64_t>(std::llround(rule.horizon * scene.frame_rate));

    std::vector<std::int64_t> starts;
    if (scene.tracks.empty()) {
        starts.push_back(0);  // no agents: one window, corridor trivially clear
    } else {
        for (const auto& win : window_scene(scene, spec)) starts.push_back(win.start_frame);
    }

    std::vector<WindowCrossingLabel> labels;
    labels.reserve(starts.size());
    for (const std::int64_t w0 : starts) {
        const std::int64_t decision = w0 + spec.t_obs;

        bool signal_ok = true;
        if (rule.signalized()) {
            for (std::int64_t f = w0; f < w0 + spec.total(); ++f)
                if (rule.state_at(f) != TrafficLightState::Green) {
                    signal_ok = false;
                    break;
                }
        }

        bool corridor_clear = true;
        for (const auto& track : scene.tracks) {
            for (const auto& s : track.samples) {
                if (s.frame < decision || s.frame > decision + horizon_frames) continue;
                if (rule.inside_corridor(s.x, s.y)) {
                    corridor_clear = false;
                    break;
                }
            }
            if (!corridor_clear) break;
        }

        WindowCrossingLabel wl;
        wl.start_frame = w0;
        wl.label = (signal_ok && corridor_clear) ? CrossingLabel::Cross : CrossingLabel::DontCross;
        wl.signal_at_decision = rule.signalized() ? rule.state_at(decision) : TrafficLightState::Off;
        labels.push_back(wl);
    }
    return labels;
}

// Synthetic traffic-light patch: a colored disc at a jittered position over
// a noisy gray background; Off renders no disc. Returns [3 x size x size]
// with values in [0, 1].
inline Tensor render_signal_patch(TrafficLightState state, int size, double noise, std::uint64_t seed) {
    if (size < 16) throw std::invalid_argument("render_signal_patch: size must be >= 16");
    Rng rng(seed);
    Tensor img({3, size, size});
    for (std::int64_t i = 0; i < img.size(); ++i)
        img[i] = std::clamp(0.5 + noise * rng.uniform(-1.0, 1.0), 0.0, 1.0);

    if (state == TrafficLightState::Off) return img;

    double r = 0, g = 0, b = 0;
    switch (state) {
        case TrafficLightState::Red: r = 0.95; g = 0.10; b = 0.10; break;
        case TrafficLightState::Green: r = 0.10; g = 0.95; b = 0.15; break;
        case TrafficLightState::Yellow: r = 0.95; g = 0.85; b = 0.10; break;
        case TrafficLightState::Off: break;
    }
    const double jitter = size / 6.0;
    const double cx = size / 2.0 + rng.uniform(-jitter, jitter);
    const double cy = size / 2.0 + rng.uniform(-jitter, jitter);
    const double radius = size / 5.0;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
            if (d <= radius) {
                img.at(0, y, x) = std::clamp(r + 0.05 * rng.uniform(-1.0, 1.0), 0.0, 1.0);
                img.at(1, y, x) = std::clamp(g + 0.05 * rng.uniform(-1.0, 1.0), 0.0, 1.0);
                img.at(2, y, x) = std::clamp(b + 0.05 * rng.uniform(-1.0, 1.0), 0.0, 1.0);
            }
        }
    return img;
}

// Balanced labeled image set, `per_class` patches for each state in
// `classes`; labels are indices into `classes`.
inline ImageDataset make_signal_dataset(int per_class, const std::vector<TrafficLightState>& classes,
                                        int size, double noise, std::uint64_t seed) {
    if (per_class < 1 || classes.empty())
        throw std::invalid_argument("make_signal_dataset: need classes and per_class >= 1");
    Rng rng(seed);
    ImageDataset out;
    out.reserve(static_cast<std::size_t>(per_class) * classes.size());
    for (int i = 0; i < per_class; ++i)
        for (std::size_t c = 0; c < classes.size(); ++c)
            out.push_back(LabeledImage{
                render_signal_patch(classes[c], size, noise, rng.next_u64()),
                static_cast<int>(c)});
    return out;
}

}  // namespace arcp
