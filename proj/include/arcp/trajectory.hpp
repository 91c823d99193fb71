#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "arcp/io_util.hpp"
#include "arcp/tensor.hpp"

namespace arcp {

// One timestamped state of a dynamic agent: planar position, speed and yaw
// as the (qw, qz) components of a z-axis rotation quaternion.
struct AgentSample {
    std::int64_t frame = 0;
    double x = 0.0;
    double y = 0.0;
    double v = 0.0;
    double qw = 1.0;
    double qz = 0.0;

    double yaw() const { return 2.0 * std::atan2(qz, qw); }
};

struct AgentTrack {
    std::int64_t agent_id = 0;
    std::vector<AgentSample> samples;  // frames strictly increasing

    std::int64_t first_frame() const { return samples.front().frame; }
    std::int64_t last_frame() const { return samples.back().frame; }
};

struct Scene {
    std::vector<AgentTrack> tracks;
    double frame_rate = 2.5;  // frames per second

    std::int64_t min_frame() const {
        std::int64_t m = 0;
        bool first = true;
        for (const auto& t : tracks) {
            if (first || t.first_frame() < m) m = t.first_frame();
            first = false;
        }
        return m;
    }
    std::int64_t max_frame() const {
        std::int64_t m = 0;
        bool first = true;
        for (const auto& t : tracks) {
            if (first || t.last_frame() > m) m = t.last_frame();
            first = false;
        }
        return m;
    }
};

// Windowing parameters: observation length, prediction horizon, hop between
// window starts and the fixed agent-slot count N the batches are padded to.
struct WindowSpec {
    int t_obs = 8;
    int t_pred = 12;
    int stride = 20;
    int n_max = 32;

    void validate() const {
        if (t_obs <= 0 || t_pred <= 0 || stride <= 0 || n_max <= 0)
            throw std::invalid_argument("WindowSpec: all fields must be positive");
    }
    int total() const { return t_obs + t_pred; }
};

// Padded feature block [N x T x 5] with a {0,1} validity mask [N x T].
// Rows are ordered by agent detection time; masked-out positions hold zero
// features. Used for both the observation and the target side of a window.
struct MaskedBatch {
    Tensor features;  // [n_max, T, 5]
    Tensor mask;      // [n_max, T]
    std::vector<std::int64_t> agent_ids;  // one per occupied leading row

    int n_slots() const { return mask.dim(0); }
    int t_len() const { return mask.dim(1); }
    int active_agents() const { return static_cast<int>(agent_ids.size()); }
};

using ObservationBatch = MaskedBatch;
using TargetBatch = MaskedBatch;

struct SceneWindow {
    ObservationBatch obs;
    TargetBatch target;
    std::int64_t start_frame = 0;
};

// ----- canonical CSV ingestion ------------------------------------------------

inline constexpr const char* kCanonicalHeader = "frame,agent_id,x,y,v,qw,qz";

struct LoadReport {
    Scene scene;
    int normalized_quaternions = 0;  // inputs with |q| != 1 that were rescaled
};

// Reads the canonical trajectory CSV. Malformed content is reported with its
// 1-based line number; quaternions off unit norm (but non-degenerate) are
// normalized and tallied rather than rejected.
inline LoadReport load_canonical(const std::string& path, double frame_rate = 2.5) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_canonical: cannot open " + path);
    LoadReport report;
    report.scene.frame_rate = frame_rate;

    auto fail = [&](std::size_t lineno, const std::string& what) {
        throw std::runtime_error("load_canonical: " + path + " line " + std::to_string(lineno) +
                                 ": " + what);
    };

    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(in, line)) fail(1, "empty file");
    ++lineno;
    if (strip_cr(line) != kCanonicalHeader)
        fail(lineno, "expected header '" + std::string(kCanonicalHeader) + "'");

    std::map<std::int64_t, std::size_t> track_index;  // agent_id -> tracks position
    while (std::getline(in, line)) {
        ++lineno;
        line = strip_cr(line);
        if (line.empty()) continue;
        auto fields = split_csv_line(line);
        if (fields.size() != 7)
            fail(lineno, "expected 7 fields, got " + std::to_string(fields.size()));

        AgentSample s;
        std::int64_t agent_id = 0;
        if (!parse_int64(fields[0], s.frame) || s.frame < 0) fail(lineno, "bad frame '" + fields[0] + "'");
        if (!parse_int64(fields[1], agent_id)) fail(lineno, "bad agent_id '" + fields[1] + "'");
        const char* names[] = {"x", "y", "v", "qw", "qz"};
        double* dst[] = {&s.x, &s.y, &s.v, &s.qw, &s.qz};
        for (int i = 0; i < 5; ++i) {
            if (!parse_double(fields[2 + i], *dst[i]) || !std::isfinite(*dst[i]))
                fail(lineno, std::string("bad ") + names[i] + " '" + fields[2 + i] + "'");
        }
        if (s.v < 0) fail(lineno, "negative speed");
        const double norm = std::sqrt(s.qw * s.qw + s.qz * s.qz);
        if (norm < 1e-12) fail(lineno, "zero-norm quaternion");
        if (std::abs(norm - 1.0) > 1e-9) {
            s.qw /= norm;
            s.qz /= norm;
            ++report.normalized_quaternions;
        }

        auto it = track_index.find(agent_id);
        if (it == track_index.end()) {
            track_index.emplace(agent_id, report.scene.tracks.size());
            report.scene.tracks.push_back(AgentTrack{agent_id, {s}});
        } else {
            AgentTrack& track = report.scene.tracks[it->second];
            if (s.frame <= track.last_frame())
                fail(lineno, "non-monotonic frame for agent " + std::to_string(agent_id));
            track.samples.push_back(s);
        }
    }
    return report;
}

inline void write_canonical(const std::string& path, const Scene& scene) {
    std::string out = std::string(kCanonicalHeader) + "\n";
    for (const auto& track : scene.tracks)
        for (const auto& s : track.samples) {
            out += std::to_string(s.frame);
            out += ',';
            out += std::to_string(track.agent_id);
            out += ',';
            out += format_double(s.x);
            out += ',';
            out += format_double(s.y);
            out += ',';
            out += format_double(s.v);
            out += ',';
            out += format_double(s.qw);
            out += ',';
            out += format_double(s.qz);
            out += '\n';
        }
    write_text_file(path, out);
}

// ----- relative encoding --------------------------------------------------------

// Expresses all agent states in the frame of a robot at (x, y) with heading
// yaw. Positions are translated/rotated, speeds keep their magnitude, and
// yaw quaternions are composed with the inverse robot rotation.
inline Scene encode_relative(const Scene& scene, double robot_x, double robot_y, double robot_yaw) {
    if (!std::isfinite(robot_x) || !std::isfinite(robot_y) || !std::isfinite(robot_yaw))
        throw std::invalid_argument("encode_relative: robot pose must be finite");
    const double c = std::cos(robot_yaw), s = std::sin(robot_yaw);
    const double ch = std::cos(robot_yaw / 2.0), sh = std::sin(robot_yaw / 2.0);
    Scene out = scene;
    for (auto& track : out.tracks)
        for (auto& sample : track.samples) {
            const double dx = sample.x - robot_x;
            const double dy = sample.y - robot_y;
            sample.x = c * dx + s * dy;
            sample.y = -s * dx + c * dy;
            const double qw = sample.qw * ch + sample.qz * sh;
            const double qz = sample.qz * ch - sample.qw * sh;
            const double norm = std::sqrt(qw * qw + qz * qz);
            sample.qw = qw / norm;
            sample.qz = qz / norm;
        }
    return out;
}

// ----- windowing ------------------------------------------------------------------

namespace detail {

inline void place_sample(MaskedBatch& batch, int row, int t, const AgentSample& s) {
    batch.mask.at(row, t) = 1.0;
    batch.features.at(row, t, 0) = s.x;
    batch.features.at(row, t, 1) = s.y;
    batch.features.at(row, t, 2) = s.v;
    batch.features.at(row, t, 3) = s.qw;
    batch.features.at(row, t, 4) = s.qz;
}

}  // namespace detail

// Cuts a scene into fixed-size windows of t_obs observed plus t_pred target
// frames. Agents observed for fewer than 2 frames in a window are masked out
// of it entirely; when more than n_max agents qualify, the latest-detected
// ones are dropped. Rows are ordered by first detection frame.
inline std::vector<SceneWindow> window_scene(const Scene& scene, const WindowSpec& spec) {
    spec.validate();
    std::vector<SceneWindow> windows;
    if (scene.tracks.empty()) return windows;

    const std::int64_t fmin = scene.min_frame();
    const std::int64_t fmax = scene.max_frame();

    for (std::int64_t w0 = fmin; w0 <= fmax; w0 += spec.stride) {
        const std::int64_t obs_end = w0 + spec.t_obs;        // exclusive
        const std::int64_t tgt_end = obs_end + spec.t_pred;  // exclusive

        // (detection frame, agent id, track index) for eligible agents
        std::vector<std::tuple<std::int64_t, std::int64_t, std::size_t>> eligible;
        for (std::size_t ti = 0; ti < scene.tracks.size(); ++ti) {
            const AgentTrack& track = scene.tracks[ti];
            int observed = 0;
            for (const auto& s : track.samples)
                if (s.frame >= w0 && s.frame < obs_end) ++observed;
            if (observed >= 2) eligible.emplace_back(track.first_frame(), track.agent_id, ti);
        }
        if (eligible.empty()) continue;
        std::sort(eligible.begin(), eligible.end());
        if (static_cast<int>(eligible.size()) > spec.n_max)
            eligible.resize(static_cast<std::size_t>(spec.n_max));

        SceneWindow win;
        win.start_frame = w0;
        win.obs.features = Tensor::zeros({spec.n_max, spec.t_obs, 5});
        win.obs.mask = Tensor::zeros({spec.n_max, spec.t_obs});
        win.target.features = Tensor::zeros({spec.n_max, spec.t_pred, 5});
        win.target.mask = Tensor::zeros({spec.n_max, spec.t_pred});

        for (std::size_t row = 0; row < eligible.size(); ++row) {
            const AgentTrack& track = scene.tracks[std::get<2>(eligible[row])];
            win.obs.agent_ids.push_back(track.agent_id);
            win.target.agent_ids.push_back(track.agent_id);
            for (const auto& s : track.samples) {
                if (s.frame >= w0 && s.frame < obs_end)
                    detail::place_sample(win.obs, static_cast<int>(row),
                                         static_cast<int>(s.frame - w0), s);
                else if (s.frame >= obs_end && s.frame < tgt_end)
                    detail::place_sample(win.target, static_cast<int>(row),
                                         static_cast<int>(s.frame - obs_end), s);
            }
        }
        windows.push_back(std::move(win));
    }
    return windows;
}

}  // namespace arcp
